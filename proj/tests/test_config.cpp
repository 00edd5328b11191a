#include <doctest.h>

#include "dsc/config.hpp"

using namespace dsc;

TEST_CASE("key=value parsing with comments and whitespace") {
  const std::string text =
      "# leading comment\n"
      "steps = 100\n"
      "  lr=0.003   \n"
      "kind=dsc # trailing comment\n"
      "\n"
      "empty_value=\n";
  KeyValueMap kv = parse_kv_text(text);
  CHECK(kv.size() == 4);
  CHECK(kv["steps"] == "100");
  CHECK(kv["lr"] == "0.003");
  CHECK(kv["kind"] == "dsc");
  CHECK(kv["empty_value"] == "");
}

TEST_CASE("duplicate keys and malformed lines are rejected") {
  CHECK_THROWS_AS(parse_kv_text("a=1\na=2\n"), ConfigError);
  CHECK_THROWS_AS(parse_kv_text("just a bare line\n"), ConfigError);
}

TEST_CASE("unknown keys are rejected explicitly") {
  KeyValueMap kv = parse_kv_text("steps=5\ntypo_key=1\n");
  CHECK_THROWS_AS(reject_unknown_keys(kv, {"steps"}), ConfigError);
  CHECK_NOTHROW(reject_unknown_keys(kv, {"steps", "typo_key"}));
}

TEST_CASE("serialization is sorted and round-trips") {
  KeyValueMap kv{{"zebra", "1"}, {"alpha", "two"}, {"mid", "3.5"}};
  const std::string s = serialize_kv(kv);
  CHECK(s == "alpha=two\nmid=3.5\nzebra=1\n");
  CHECK(parse_kv_text(s) == kv);
}

TEST_CASE("missing file errors out") {
  CHECK_THROWS_AS(parse_kv_file("/tmp/no_such_config_file.cfg"), ConfigError);
}
