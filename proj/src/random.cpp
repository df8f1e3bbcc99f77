#include "cssc/random.hpp"

#include <sstream>

#include "cssc/error.hpp"

namespace cssc {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::restore(const std::string& state) {
  std::istringstream is(state);
  is >> engine_;
  if (!is) throw Error("rng: corrupt generator state");
}

}  // namespace cssc
