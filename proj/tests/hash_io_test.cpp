#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "zsv/hash.hpp"
#include "zsv/io.hpp"

TEST(Fnv1a64, KnownVectors) {
  EXPECT_EQ(zsv::to_hex16(zsv::fnv1a64("")), "cbf29ce484222325");
  EXPECT_EQ(zsv::to_hex16(zsv::fnv1a64("a")), "af63dc4c8601ec8c");
  EXPECT_EQ(zsv::to_hex16(zsv::fnv1a64("foobar")), "85944171f73967e8");
  static_assert(zsv::fnv1a64("") == 0xcbf29ce484222325ULL);
}

TEST(Fnv1a64, FieldsAreLengthPrefixed) {
  EXPECT_NE(zsv::fnv1a64_fields({"ab", "c"}), zsv::fnv1a64_fields({"a", "bc"}));
  EXPECT_EQ(zsv::fnv1a64_fields({"ab", "c"}), zsv::fnv1a64_fields({"ab", "c"}));
}

TEST(Base64, RoundTripsArbitraryBytes) {
  EXPECT_EQ(zsv::base64_encode(""), "");
  EXPECT_EQ(zsv::base64_encode("f"), "Zg==");
  EXPECT_EQ(zsv::base64_encode("fo"), "Zm8=");
  EXPECT_EQ(zsv::base64_encode("foobar"), "Zm9vYmFy");
  std::mt19937 rng(7);
  for (int n = 0; n < 200; ++n) {
    std::string s(static_cast<std::size_t>(n), '\0');
    for (auto& c : s) c = static_cast<char>(rng() & 0xff);
    EXPECT_EQ(zsv::base64_decode(zsv::base64_encode(s)), s);
  }
}

TEST(EscapeField, RoundTripsControlCharacters) {
  for (std::string s : {"plain", "tab\there", "new\nline", "back\\slash", "", "\r\t\n\\"}) {
    auto e = zsv::escape_field(s);
    EXPECT_EQ(e.find('\t'), std::string::npos);
    EXPECT_EQ(e.find('\n'), std::string::npos);
    EXPECT_EQ(zsv::unescape_field(e), s);
  }
}

TEST(Io, AtomicWriteCreatesParentsAndReplaces) {
  zsv_test::TempDir dir;
  auto p = dir / "a/b/c.txt";
  zsv::write_file_atomic(p, "one");
  EXPECT_EQ(zsv::read_file(p), "one");
  zsv::write_file_atomic(p, "two");
  EXPECT_EQ(zsv::read_file(p), "two");
  EXPECT_THROW(zsv::read_file(dir / "missing"), zsv::IoError);
}

TEST(Io, SplitAndTrim) {
  EXPECT_EQ(zsv::split("a\tb\t", '\t'), (std::vector<std::string>{"a", "b", ""}));
  EXPECT_EQ(zsv::trim("  x y \n"), "x y");
  EXPECT_EQ(zsv::trim("   "), "");
}
