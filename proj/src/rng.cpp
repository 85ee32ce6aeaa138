#include "stamp/rng.hpp"

#include "stamp/errors.hpp"

#include <sstream>

namespace stamp {

std::string RngStreams::serialize() const {
  std::ostringstream os;
  os << data << '\n' << mask << '\n' << latent << '\n' << init;
  return os.str();
}

RngStreams RngStreams::deserialize(const std::string& text) {
  RngStreams r;
  std::istringstream is(text);
  is >> r.data >> r.mask >> r.latent >> r.init;
  check(!is.fail(), ErrorKind::Checkpoint, "corrupt RNG stream state");
  return r;
}

}  // namespace stamp
