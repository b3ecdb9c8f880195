#include "maskrestore/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace maskrestore {

namespace {

template <typename T>
Tensor<T> leaf_from(const Tensor<T>& like, std::vector<T> values) {
    return Tensor<T>::from(like.shape(), std::move(values), true);
}

void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": input " + to_string(a) + " vs baseline " + to_string(b));
}

// Walks path points X(0..N) once, accumulating sum_j g_j . (y_{j+1} - y_j) per
// layer. Left rule uses g_j; trapezoid uses (g_j + g_{j+1}) / 2.
template <typename T>
std::vector<LayerMac> sweep(const ProbeFn<T>& f, const std::function<Tensor<T>(std::size_t)>& point, std::size_t steps,
                            Quadrature quadrature, const std::string* only) {
    std::vector<LayerMac> out;
    std::vector<std::vector<double>> prev_value, prev_grad;
    for (std::size_t j = 0; j <= steps; ++j) {
        const bool need_grad = j < steps || quadrature == Quadrature::trapezoid;
        Probe<T> probe = f(point(j));
        if (probe.output.numel() != 1) throw ShapeError("attribution target must be scalar");
        std::vector<std::size_t> picked;
        for (std::size_t l = 0; l < probe.layers.size(); ++l)
            if (!only || probe.layers[l].first == *only) picked.push_back(l);
        if (j == 0) {
            if (picked.empty()) throw std::invalid_argument("layer '" + (only ? *only : std::string()) +
                                                            "' is not reported by the attribution target");
            const Graph<T> graph = trace(probe.output);
            for (std::size_t l : picked) {
                if (!graph.contains(probe.layers[l].second.node()))
                    throw std::invalid_argument("layer '" + probe.layers[l].first +
                                                "' is not part of the target's graph");
                out.push_back({probe.layers[l].first, std::vector<double>(probe.layers[l].second.numel(), 0.0), 0.0});
            }
            prev_value.resize(picked.size());
            prev_grad.resize(picked.size());
        }
        if (need_grad && probe.output.requires_grad()) probe.output.backward();
        for (std::size_t p = 0; p < picked.size(); ++p) {
            const Tensor<T>& y = probe.layers[picked[p]].second;
            if (y.numel() != out[p].per_unit.size())
                throw ShapeError("layer '" + out[p].name + "' changed size along the path");
            std::vector<double> value(y.data().begin(), y.data().end());
            std::vector<double> grad;
            if (need_grad) {
                if (y.has_grad())
                    grad.assign(y.grad().begin(), y.grad().end());
                else
                    grad.assign(y.numel(), 0.0);
            }
            if (j > 0) {
                auto& acc = out[p].per_unit;
                const auto& v0 = prev_value[p];
                const auto& g0 = prev_grad[p];
                if (quadrature == Quadrature::left) {
                    for (std::size_t u = 0; u < acc.size(); ++u) acc[u] += g0[u] * (value[u] - v0[u]);
                } else {
                    for (std::size_t u = 0; u < acc.size(); ++u)
                        acc[u] += 0.5 * (g0[u] + grad[u]) * (value[u] - v0[u]);
                }
            }
            prev_value[p] = std::move(value);
            prev_grad[p] = std::move(grad);
        }
    }
    return out;
}

template <typename T>
std::function<Tensor<T>(std::size_t)> straight_path(const Tensor<T>& x, const Tensor<T>& baseline, std::size_t steps) {
    return [x, baseline, steps](std::size_t j) {
        const double a = static_cast<double>(j) / static_cast<double>(steps);
        std::vector<T> v(x.numel());
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<T>(baseline.at(i) + a * (static_cast<double>(x.at(i)) - baseline.at(i)));
        return leaf_from(x, std::move(v));
    };
}

// Pixel index of each element: per element when alpha matches numel,
// otherwise [.., C, H, W] with one time per (image, pixel).
std::vector<std::size_t> alpha_index(const Shape& shape, std::size_t numel, std::size_t alphas) {
    std::vector<std::size_t> idx(numel);
    if (alphas == numel) {
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }
    if (shape.size() < 3) throw ShapeError("per-pixel switch times need an image-shaped input, got " + to_string(shape));
    const std::size_t plane = shape[shape.size() - 1] * shape[shape.size() - 2];
    const std::size_t channels = shape[shape.size() - 3];
    if (alphas * channels != numel)
        throw ShapeError("path has " + std::to_string(alphas) + " switch times for input " + to_string(shape));
    for (std::size_t e = 0; e < numel; ++e) idx[e] = (e / (channels * plane)) * plane + e % plane;
    return idx;
}

}  // namespace

Quadrature parse_quadrature(const std::string& name) {
    if (name == "left") return Quadrature::left;
    if (name == "trapezoid") return Quadrature::trapezoid;
    throw std::invalid_argument("unknown quadrature '" + name + "' (expected left or trapezoid)");
}

Aggregation parse_aggregation(const std::string& name) {
    if (name == "absolute") return Aggregation::absolute;
    if (name == "plain") return Aggregation::plain;
    throw std::invalid_argument("unknown aggregation '" + name + "' (expected absolute or plain)");
}

std::string quadrature_name(Quadrature q) { return q == Quadrature::left ? "left" : "trapezoid"; }
std::string aggregation_name(Aggregation a) { return a == Aggregation::absolute ? "absolute" : "plain"; }

template <typename T>
std::vector<double> integrated_gradients(const ScalarFn<T>& f, const Tensor<T>& x, const Tensor<T>& baseline,
                                         std::size_t steps) {
    if (steps == 0) throw std::invalid_argument("integrated_gradients needs at least one step");
    check_same_shape(x.shape(), baseline.shape(), "integrated_gradients");
    std::vector<double> total(x.numel(), 0.0);
    for (std::size_t j = 0; j < steps; ++j) {
        const double a = (static_cast<double>(j) + 0.5) / static_cast<double>(steps);
        std::vector<T> v(x.numel());
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<T>(baseline.at(i) + a * (static_cast<double>(x.at(i)) - baseline.at(i)));
        Tensor<T> point = leaf_from(x, std::move(v));
        Tensor<T> y = f(point);
        if (y.numel() != 1) throw ShapeError("integrated_gradients target must be scalar");
        if (!y.requires_grad()) continue;  // constant target
        y.backward();
        if (!point.has_grad()) continue;
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += point.grad()[i];
    }
    for (std::size_t i = 0; i < total.size(); ++i)
        total[i] *= (static_cast<double>(x.at(i)) - baseline.at(i)) / static_cast<double>(steps);
    return total;
}

template <typename T>
std::vector<double> layer_conductance(const ProbeFn<T>& f, const std::string& layer, const Tensor<T>& x,
                                      const Tensor<T>& baseline, std::size_t steps, Quadrature quadrature) {
    if (steps == 0) throw std::invalid_argument("layer_conductance needs at least one step");
    check_same_shape(x.shape(), baseline.shape(), "layer_conductance");
    auto result = sweep<T>(f, straight_path(x, baseline, steps), steps, quadrature, &layer);
    return std::move(result.front().per_unit);
}

template <typename T>
double neuron_conductance(const ProbeFn<T>& f, const std::string& layer, std::size_t unit, const Tensor<T>& x,
                          const Tensor<T>& baseline, std::size_t steps, Quadrature quadrature) {
    const auto per_unit = layer_conductance(f, layer, x, baseline, steps, quadrature);
    if (unit >= per_unit.size())
        throw std::out_of_range("unit " + std::to_string(unit) + " outside layer '" + layer + "' of " +
                                std::to_string(per_unit.size()) + " units");
    return per_unit[unit];
}

void PathSpec::validate() const {
    if (!(delta > 0.0)) throw std::invalid_argument("path sharpness delta must be positive");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("partial path ratio r must lie in (0,1]");
    if (steps < 4) throw std::invalid_argument("MAC needs at least 4 quadrature steps, got " + std::to_string(steps));
    if (alpha.empty()) throw std::invalid_argument("path has no switch times");
    for (double a : alpha)
        if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("switch time outside (0,1]");
}

double alpha_margin(double delta, double ratio) {
    double m = std::min(10.0 / delta, ratio / 4.0);
    if (ratio < 1.0) m = std::min(m, (1.0 - ratio) / 4.0);
    return m;
}

std::vector<double> assign_alpha(std::span<const Mask> masks, double ratio, double delta, Rng& rng) {
    if (masks.empty()) throw std::invalid_argument("assign_alpha needs at least one mask");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("partial path ratio r must lie in (0,1]");
    const std::size_t plane = masks.front().size();
    const double m = alpha_margin(delta, ratio);
    std::vector<std::size_t> masked, visible;
    for (std::size_t n = 0; n < masks.size(); ++n) {
        if (masks[n].size() != plane) throw std::invalid_argument("masks differ in size");
        for (std::size_t i = 0; i < plane; ++i) (ratio < 1.0 && !masks[n][i] ? visible : masked).push_back(n * plane + i);
    }
    std::vector<double> alpha(masks.size() * plane, 0.0);
    auto place = [&](std::vector<std::size_t>& pixels, double lo, double hi) {
        if (pixels.empty()) return;
        if (!(hi > lo)) throw std::invalid_argument("switch-time interval is empty");
        std::vector<std::size_t> slot(pixels.size());
        std::iota(slot.begin(), slot.end(), 0);
        std::shuffle(slot.begin(), slot.end(), rng.engine());
        const double count = static_cast<double>(pixels.size());
        for (std::size_t k = 0; k < pixels.size(); ++k)
            alpha[pixels[k]] = lo + (hi - lo) * (static_cast<double>(slot[k]) + 0.5) / count;
    };
    place(masked, 1.0 - ratio + m, 1.0 - m);
    place(visible, m, 1.0 - ratio - m);
    return alpha;
}

template <typename T>
Tensor<T> map_path_point(const Tensor<T>& x, const Tensor<T>& baseline, const PathSpec& spec, double alpha) {
    check_same_shape(x.shape(), baseline.shape(), "map_path_point");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("path position must lie in [0,1]");
    const auto idx = alpha_index(x.shape(), x.numel(), spec.alpha.size());
    std::vector<T> v(x.numel());
    for (std::size_t e = 0; e < v.size(); ++e) {
        const double t = 1.0 / (1.0 + std::exp(-spec.delta * (alpha - spec.alpha[idx[e]])));
        const double b = static_cast<double>(baseline.at(e));
        v[e] = static_cast<T>(b + (static_cast<double>(x.at(e)) - b) * t);
    }
    return Tensor<T>::from(x.shape(), std::move(v));
}

double aggregate(std::span<const double> per_unit, Aggregation aggregation) {
    double s = 0.0;
    for (double v : per_unit) s += aggregation == Aggregation::absolute ? std::abs(v) : v;
    return s;
}

template <typename T>
std::vector<LayerMac> mac_layers(const ProbeFn<T>& f, const Tensor<T>& x, const Tensor<T>& baseline,
                                 const PathSpec& spec, Aggregation aggregation) {
    spec.validate();
    check_same_shape(x.shape(), baseline.shape(), "mac_layers");
    alpha_index(x.shape(), x.numel(), spec.alpha.size());  // shape check before the sweep
    const double start = 1.0 - spec.ratio;
    auto point = [&](std::size_t j) {
        const double a = std::min(1.0, start + spec.ratio * static_cast<double>(j) / static_cast<double>(spec.steps));
        Tensor<T> p = map_path_point(x, baseline, spec, a);
        p.set_requires_grad(true);
        return p;
    };
    auto layers = sweep<T>(f, point, spec.steps, spec.quadrature, nullptr);
    for (auto& l : layers) l.score = aggregate(l.per_unit, aggregation);
    return layers;
}

template <typename T>
double mac_layer(const ProbeFn<T>& f, const std::string& layer, const Tensor<T>& x, const Tensor<T>& baseline,
                 const PathSpec& spec, Aggregation aggregation) {
    spec.validate();
    check_same_shape(x.shape(), baseline.shape(), "mac_layer");
    alpha_index(x.shape(), x.numel(), spec.alpha.size());
    const double start = 1.0 - spec.ratio;
    auto point = [&](std::size_t j) {
        const double a = std::min(1.0, start + spec.ratio * static_cast<double>(j) / static_cast<double>(spec.steps));
        Tensor<T> p = map_path_point(x, baseline, spec, a);
        p.set_requires_grad(true);
        return p;
    };
    auto result = sweep<T>(f, point, spec.steps, spec.quadrature, &layer);
    return aggregate(result.front().per_unit, aggregation);
}

// ---------------------------------------------------------------- ranking

std::vector<std::string> LayerReport::selected() const {
    std::vector<std::string> names;
    for (const auto& l : layers)
        if (l.selected) names.push_back(l.name);
    return names;
}

std::size_t selection_count(std::size_t layers, double k_percent) {
    if (!(k_percent > 0.0 && k_percent <= 100.0))
        throw std::invalid_argument("k_percent must lie in (0,100], got " + std::to_string(k_percent));
    const double raw = k_percent / 100.0 * static_cast<double>(layers);
    return std::min(layers, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

LayerReport rank_and_select(const std::vector<std::pair<std::string, double>>& scores, double k_percent) {
    if (scores.empty()) throw std::invalid_argument("rank_and_select: no layer scores");
    const std::size_t keep = selection_count(scores.size(), k_percent);
    auto sorted = scores;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.second > b.second || (a.second == b.second && a.first < b.first);
    });
    LayerReport report;
    report.k_percent = k_percent;
    for (std::size_t i = 0; i < sorted.size(); ++i)
        report.layers.push_back({sorted[i].first, sorted[i].second, i + 1, i < keep});
    return report;
}

void write_report(const std::filesystem::path& path, const LayerReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write layer report " + path.string());
    out.precision(17);
    out << "# k_percent " << report.k_percent << "\n# name score rank selected\n";
    for (const auto& l : report.layers) out << l.name << ' ' << l.score << ' ' << l.rank << ' ' << (l.selected ? 1 : 0) << '\n';
    if (!out) throw std::runtime_error("failed writing layer report " + path.string());
}

LayerReport read_report(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("layer report not found: " + path.string());
    LayerReport report;
    std::string line;
    std::size_t line_no = 0;
    bool have_k = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream is(line);
        if (line[0] == '#') {
            std::string hash, key;
            is >> hash >> key;
            if (key == "k_percent" && (is >> report.k_percent)) have_k = true;
            continue;
        }
        LayerRank r;
        int sel = 0;
        if (!(is >> r.name >> r.score >> r.rank >> sel))
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed layer record");
        r.selected = sel != 0;
        report.layers.push_back(std::move(r));
    }
    if (!have_k) throw std::runtime_error(path.string() + ": missing k_percent header");
    if (report.layers.empty()) throw std::runtime_error(path.string() + ": no layer records");
    return report;
}

// ---------------------------------------------------------------- restorer probe

template <typename T>
ProbeFn<T> restorer_probe(const Restorer<T>& net, const Tensor<T>& clean) {
    return [net, clean](const Tensor<T>& x) {
        RestorerTrace<T> tr;
        Tensor<T> out = restorer_forward<T>(net, x, nullptr, &tr);
        return Probe<T>{mean(abs(sub(out, clean))), std::move(tr.layer_outputs)};
    };
}

#define MASKRESTORE_INSTANTIATE_ATTRIBUTION(T)                                                                       \
    template std::vector<double> integrated_gradients<T>(const ScalarFn<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                                         std::size_t);                                               \
    template std::vector<double> layer_conductance<T>(const ProbeFn<T>&, const std::string&, const Tensor<T>&,      \
                                                      const Tensor<T>&, std::size_t, Quadrature);                    \
    template double neuron_conductance<T>(const ProbeFn<T>&, const std::string&, std::size_t, const Tensor<T>&,     \
                                          const Tensor<T>&, std::size_t, Quadrature);                                \
    template Tensor<T> map_path_point<T>(const Tensor<T>&, const Tensor<T>&, const PathSpec&, double);              \
    template std::vector<LayerMac> mac_layers<T>(const ProbeFn<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                                 const PathSpec&, Aggregation);                                      \
    template double mac_layer<T>(const ProbeFn<T>&, const std::string&, const Tensor<T>&, const Tensor<T>&,         \
                                 const PathSpec&, Aggregation);                                                      \
    template ProbeFn<T> restorer_probe<T>(const Restorer<T>&, const Tensor<T>&);

MASKRESTORE_INSTANTIATE_ATTRIBUTION(float)
MASKRESTORE_INSTANTIATE_ATTRIBUTION(double)

#undef MASKRESTORE_INSTANTIATE_ATTRIBUTION

}  // namespace maskrestore
