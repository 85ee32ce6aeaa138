#include "doctest.h"

#include "stamp/config.hpp"
#include "stamp/errors.hpp"

using namespace stamp;
using namespace stamp::config;

namespace {

std::string parse_error(std::string_view text) {
  try {
    parse_config(text);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Parse);
    return e.what();
  }
  FAIL("expected a parse error");
  return {};
}

}  // namespace

TEST_CASE("empty text gives the profile defaults") {
  CHECK(parse_config("") == profile_defaults("desk"));
  CHECK(parse_config("# nothing here\n\n") == profile_defaults("desk"));
  CHECK(parse_config("profile = paper\n") == profile_defaults("paper"));
  CHECK(parse_config("", "paper").train.encoder.embed_dim == 768);
}

TEST_CASE("values override the profile") {
  const RunConfig c = parse_config("[pretrain]\nmask_ratio = 0.5  # lighter\nepochs = 3\n[probe]\npool = mean_linear\n");
  CHECK(c.train.mask_ratio == 0.5);
  CHECK(c.train.epochs == 3);
  CHECK(c.probe.pool == eval::Pool::MeanLinear);
}

TEST_CASE("range, key and type errors cite the line") {
  const std::string range = parse_error("\n[pretrain]\nmask_ratio = 1.5\n");
  CHECK(range.find("line 3") != std::string::npos);
  CHECK(range.find("[0,1)") != std::string::npos);
  CHECK(parse_error("[pretrain]\nmask_rate = 0.5\n").find("line 2") != std::string::npos);
  CHECK(parse_error("[pretrain]\nepochs = many\n").find("line 2") != std::string::npos);
  CHECK(parse_error("[pretrain]\nepochs = 2.5\n").find("line 2") != std::string::npos);
  CHECK(parse_error("[nowhere]\n").find("line 1") != std::string::npos);
  CHECK(parse_error("epochs = 2\n").find("line 1") != std::string::npos);
  CHECK(parse_error("[pretrain]\nepochs = 2\nprofile = paper\n").find("line 3") != std::string::npos);
}

TEST_CASE("emit and parse round-trip") {
  for (const char* profile : {"desk", "paper"}) {
    RunConfig c = profile_defaults(profile);
    c.train.beta = 0.125;
    c.train.seed = 77;
    c.probe.lr_grid = {0.001, 0.02};
    c.data.tau_min = 4.5;
    const std::string text = emit_config(c);
    const RunConfig back = parse_config(text);
    CHECK(back == c);
    CHECK(emit_config(back) == text);
    CHECK(config_digest(back) == config_digest(c));
  }
  RunConfig c = profile_defaults("desk");
  const auto digest = config_digest(c);
  c.train.lr *= 2.0;
  CHECK(config_digest(c) != digest);
}

TEST_CASE("train config round-trips through checkpoint text") {
  const auto train = profile_defaults("paper").train;
  CHECK(emit_train_config(parse_train_config(emit_train_config(train))) == emit_train_config(train));
}
