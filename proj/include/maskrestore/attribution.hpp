#pragma once

// Path attribution: integrated gradients, conductance of hidden units along
// a straight path, and mask attribute conductance (MAC) along a path on which
// every pixel switches from the baseline to its true value at its own time.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "maskrestore/masking.hpp"
#include "maskrestore/models.hpp"
#include "maskrestore/rng.hpp"
#include "maskrestore/tensor.hpp"

namespace maskrestore {

template <typename T>
using ScalarFn = std::function<Tensor<T>(const Tensor<T>&)>;

// Scalar output together with the named hidden activations it was computed from.
template <typename T>
struct Probe {
    Tensor<T> output;
    std::vector<std::pair<std::string, Tensor<T>>> layers;
};

template <typename T>
using ProbeFn = std::function<Probe<T>(const Tensor<T>&)>;

enum class Quadrature { left, trapezoid };
enum class Aggregation { absolute, plain };

Quadrature parse_quadrature(const std::string& name);
Aggregation parse_aggregation(const std::string& name);
std::string quadrature_name(Quadrature q);
std::string aggregation_name(Aggregation a);

// Midpoint rule over N steps of the straight path from baseline to x.
template <typename T>
std::vector<double> integrated_gradients(const ScalarFn<T>& f, const Tensor<T>& x, const Tensor<T>& baseline,
                                         std::size_t steps);

// Per-unit conductance of one named layer along the straight path.
// Throws if the layer is not recorded in f's graph.
template <typename T>
std::vector<double> layer_conductance(const ProbeFn<T>& f, const std::string& layer, const Tensor<T>& x,
                                      const Tensor<T>& baseline, std::size_t steps,
                                      Quadrature quadrature = Quadrature::trapezoid);

template <typename T>
double neuron_conductance(const ProbeFn<T>& f, const std::string& layer, std::size_t unit, const Tensor<T>& x,
                          const Tensor<T>& baseline, std::size_t steps, Quadrature quadrature = Quadrature::trapezoid);

struct PathSpec {
    // One switch time per pixel; a pixel covers every channel of its image.
    // Index n*H*W + i for image n of a batch, i for a single image.
    std::vector<double> alpha;
    double delta = 100.0;
    double ratio = 0.5;  // r: the path is followed over [1-r, 1]
    std::size_t steps = 64;
    Quadrature quadrature = Quadrature::left;

    void validate() const;
};

// Half-width of the band kept free of switch times around 0, 1-r and 1.
double alpha_margin(double delta, double ratio);

// Stratified permutation of switch times. Visible pixels of each mask get
// times in [m, 1-r-m], masked pixels in [1-r+m, 1-m]; all times are distinct.
// With ratio 1 the masks are ignored and every pixel lies in [m, 1-m].
std::vector<double> assign_alpha(std::span<const Mask> masks, double ratio, double delta, Rng& rng);

// x' + (x - x') * sigmoid(delta * (alpha - alpha_i)) for every element.
template <typename T>
Tensor<T> map_path_point(const Tensor<T>& x, const Tensor<T>& baseline, const PathSpec& spec, double alpha);

struct LayerMac {
    std::string name;
    std::vector<double> per_unit;
    double score = 0.0;
};

// MAC of every layer reported by f, from one sweep along the path.
template <typename T>
std::vector<LayerMac> mac_layers(const ProbeFn<T>& f, const Tensor<T>& x, const Tensor<T>& baseline,
                                 const PathSpec& spec, Aggregation aggregation = Aggregation::absolute);

template <typename T>
double mac_layer(const ProbeFn<T>& f, const std::string& layer, const Tensor<T>& x, const Tensor<T>& baseline,
                 const PathSpec& spec, Aggregation aggregation = Aggregation::absolute);

double aggregate(std::span<const double> per_unit, Aggregation aggregation);

// ---------------------------------------------------------------- ranking

struct LayerRank {
    std::string name;
    double score = 0.0;
    std::size_t rank = 0;  // 1 = highest score
    bool selected = false;
};

struct LayerReport {
    double k_percent = 30.0;
    std::vector<LayerRank> layers;  // rank order

    std::vector<std::string> selected() const;
};

std::size_t selection_count(std::size_t layers, double k_percent);

// Descending score, ties broken by name.
LayerReport rank_and_select(const std::vector<std::pair<std::string, double>>& scores, double k_percent);

// Text records: "<name> <score> <rank> <selected 0|1>" after a "# k_percent <k>" header.
void write_report(const std::filesystem::path& path, const LayerReport& report);
LayerReport read_report(const std::filesystem::path& path);

// ---------------------------------------------------------------- restorer probe

// F = mean |restorer(x) - clean| with the restorer's conv outputs as layers.
template <typename T>
ProbeFn<T> restorer_probe(const Restorer<T>& net, const Tensor<T>& clean);

}  // namespace maskrestore
