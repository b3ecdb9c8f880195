#include "maskrestore/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace maskrestore {

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::restore(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw std::invalid_argument("malformed RNG state");
}

}  // namespace maskrestore
