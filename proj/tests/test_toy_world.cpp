// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "texforce/rewards.hpp"
#include "texforce/toy_world.hpp"

using namespace texforce;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool overlaps(const PlacedShape& a, const PlacedShape& b, int size) {
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (covers(a, y, x) && covers(b, y, x)) return true;
  return false;
}

}  // namespace

TEST_CASE("caption grammar parses and formats") {
  auto c = parse_caption("a red circle");
  REQUIRE(c);
  CHECK(c->groups.size() == 1);
  CHECK(c->groups[0] == CaptionGroup{1, Color::red, ShapeKind::circle});
  CHECK(c->position == Position::anywhere);

  c = parse_caption("three blue squares and a yellow triangle on the left");
  REQUIRE(c);
  CHECK(c->groups.size() == 2);
  CHECK(c->total_count() == 4);
  CHECK(c->position == Position::left);
  CHECK(format_caption(*c) == "three blue squares and a yellow triangle on the left");

  CHECK_FALSE(parse_caption(""));
  CHECK_FALSE(parse_caption("a red"));
  CHECK_FALSE(parse_caption("two red circle"));
  CHECK_FALSE(parse_caption("a red circles"));
  CHECK_FALSE(parse_caption("a orange circle"));
  CHECK_FALSE(parse_caption("a red circle on the moon"));
}

TEST_CASE("every enumerated caption round-trips through the parser") {
  const auto captions = enumerate_captions();
  const std::set<std::string> unique(captions.begin(), captions.end());
  CHECK(unique.size() == captions.size());
  // Single-shape captions: 4 counts x 5 colors x 3 shapes x (anywhere + 5 positions).
  std::size_t single = 0;
  for (const auto& text : captions) {
    const auto parsed = parse_caption(text);
    REQUIRE_MESSAGE(parsed, text);
    CHECK(format_caption(*parsed) == text);
    if (parsed->groups.size() == 1) ++single;
  }
  CHECK(single <= 4u * 5u * 3u * 6u);
  const auto words = grammar_words();
  for (const auto& text : captions) {
    std::istringstream in(text);
    std::string w;
    while (in >> w) CHECK(std::find(words.begin(), words.end(), w) != words.end());
  }
}

TEST_CASE("generate_scene single seed 7") {
  const auto a = generate_scene(7, Difficulty::single);
  const auto b = generate_scene(7, Difficulty::single);
  CHECK(a.spec.shapes.size() == 1);
  CHECK(quantize(a.image) == quantize(b.image));
  CHECK(a.caption == b.caption);
  CHECK(a.caption == caption_for(a.spec));
  const auto parsed = parse_caption(a.caption);
  REQUIRE(parsed);
  CHECK(parsed->total_count() == 1);
  CHECK(a.image.height == 32);
  CHECK(a.image.width == 32);
}

TEST_CASE("generate_scene multi seed 11 count matches component count") {
  const auto s = generate_scene(11, Difficulty::multi);
  const auto parsed = parse_caption(s.caption);
  REQUIRE(parsed);
  CHECK(static_cast<int>(find_components(s.image).size()) == parsed->total_count());
  CHECK(object_count(s.image, s.caption) == doctest::Approx(1.0));
}

TEST_CASE("rendering is a pure function of the spec and spec text round-trips") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(seed, seed % 2 ? Difficulty::multi : Difficulty::single);
    CHECK(render(s.spec) == s.image);
    const auto back = spec_from_text(spec_to_text(s.spec));
    CHECK(back == s.spec);
    CHECK(render(back) == s.image);
  }
}

TEST_CASE("make_dataset invariants on 1000 items") {
  const auto items = make_dataset(1000, 0);
  REQUIRE(items.size() == 1000);
  const auto all = enumerate_captions();
  const std::set<std::string> grammar(all.begin(), all.end());
  std::set<std::string> vocabulary;
  for (const auto& it : items) {
    const auto& shapes = it.spec.shapes;
    CHECK(shapes.size() >= 1);
    CHECK(shapes.size() <= static_cast<std::size_t>(kMaxShapes));
    for (std::size_t i = 0; i < shapes.size(); ++i)
      for (std::size_t j = i + 1; j < shapes.size(); ++j)
        CHECK_FALSE(overlaps(shapes[i], shapes[j], it.spec.image_size));
    for (float v : it.image.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(it.caption == caption_for(it.spec));
    CHECK(grammar.count(it.caption) == 1);
    vocabulary.insert(it.caption);
  }
  CHECK(vocabulary.size() <= grammar.size());
  CHECK_THROWS_AS(make_dataset(0, 0), Error);
  CHECK_THROWS_AS(make_dataset(-3, 0), Error);
}

TEST_CASE("dataset manifests are byte-identical across runs") {
  const auto base = std::filesystem::temp_directory_path() / "texforce_test_dataset";
  std::filesystem::remove_all(base);
  write_dataset(make_dataset(40, 0), base / "a");
  write_dataset(make_dataset(40, 0), base / "b");
  const auto ma = slurp(base / "a" / "manifest.tsv");
  CHECK_FALSE(ma.empty());
  CHECK(ma == slurp(base / "b" / "manifest.tsv"));
  CHECK(slurp(base / "a" / "images" / "000007.png") == slurp(base / "b" / "images" / "000007.png"));
  CHECK(read_png(base / "a" / "images" / "000003.png") == dequantize(quantize(make_dataset(4, 0)[3].image), 32, 32));
  std::filesystem::remove_all(base);
}

TEST_CASE("generated scenes are oracle-consistent") {
  const auto items = make_dataset(300, 123);
  for (const auto& it : items) {
    const auto parsed = parse_caption(it.caption);
    REQUIRE(parsed);
    INFO(it.caption);
    if (parsed->colors().size() == 1) CHECK(color_consistency(it.image, it.caption) >= 0.9);
    CHECK(object_count(it.image, it.caption) >= 0.9);
    CHECK(composition(it.image, it.caption) >= 0.9);
    if (parsed->position != Position::anywhere) CHECK(location(it.image, it.caption) >= 0.9);
  }
}

TEST_CASE("prompt splits are disjoint, non-trivial and parse") {
  for (Task task : {Task::color, Task::composition, Task::count, Task::location}) {
    const auto split = prompt_splits(task);
    INFO(to_string(task));
    CHECK(split.seen.size() >= 4);
    CHECK(split.unseen.size() >= 4);
    const std::set<std::string> seen(split.seen.begin(), split.seen.end());
    for (const auto& p : split.unseen) {
      CHECK(seen.count(p) == 0);
      CHECK(parse_caption(p));
    }
    for (const auto& p : split.seen) CHECK(parse_caption(p));
  }
  const auto color = prompt_splits(Task::color);
  auto has = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  CHECK(has(color.seen, "a green circle"));
  CHECK(has(color.unseen, "a green triangle"));
  CHECK(parse_task("count") == Task::count);
  CHECK_THROWS(parse_task("style"));
}
