// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic captioned world: colored shapes on a uniform gray background,
// described by a closed caption grammar
//
//   caption  := group (" and " group)* [" on the " position]
//   group    := count " " color " " shape["s"]
//   count    := "a" | "two" | "three" | "four"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "texforce/image.hpp"

namespace texforce {

enum class ShapeKind { circle, square, triangle };
enum class Color { red, green, blue, yellow, purple };
enum class Position { anywhere, left, right, top, bottom, center };
enum class Difficulty { single, multi };
enum class Task { color, composition, count, location };

inline constexpr std::array kShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};
inline constexpr std::array kColors{Color::red, Color::green, Color::blue, Color::yellow,
                                    Color::purple};
inline constexpr std::array kPositions{Position::left, Position::right, Position::top,
                                       Position::bottom, Position::center};
inline constexpr float kBackground = 0.5f;
inline constexpr int kMaxShapes = 4;

std::array<float, 3> palette_rgb(Color c);
std::string to_string(ShapeKind s);
std::string to_string(Color c);
std::string to_string(Position p);
std::string to_string(Task t);
Task parse_task(const std::string& name);

struct PlacedShape {
  ShapeKind kind = ShapeKind::circle;
  Color color = Color::red;
  Position position = Position::anywhere;
  int cx = 0;
  int cy = 0;
  int radius = 4;
  bool operator==(const PlacedShape&) const = default;
};

struct SceneSpec {
  std::vector<PlacedShape> shapes;
  int image_size = 32;
  float background = kBackground;
  bool operator==(const SceneSpec&) const = default;
};

struct CaptionedImage {
  Image image;
  std::string caption;
  SceneSpec spec;
};

struct CaptionGroup {
  int count = 1;
  Color color = Color::red;
  ShapeKind kind = ShapeKind::circle;
  bool operator==(const CaptionGroup&) const = default;
};

struct ParsedCaption {
  std::vector<CaptionGroup> groups;
  Position position = Position::anywhere;

  int total_count() const;
  /// Distinct color words in the caption.
  std::vector<Color> colors() const;
};

/// Parses a caption under the grammar; nullopt when it does not parse.
std::optional<ParsedCaption> parse_caption(const std::string& text);
std::string format_caption(const ParsedCaption& caption);
/// Every word the grammar can produce.
std::vector<std::string> grammar_words();
/// Every caption the scene generator can emit.
std::vector<std::string> enumerate_captions();

bool covers(const PlacedShape& s, int y, int x);
Image render(const SceneSpec& spec);
std::string caption_for(const SceneSpec& spec);

std::string spec_to_text(const SceneSpec& spec);
SceneSpec spec_from_text(const std::string& text);

CaptionedImage generate_scene(std::uint64_t seed, Difficulty difficulty, int image_size = 32);

/// Half single-object scenes, half multi-object scenes, each seeded from (seed, index).
std::vector<CaptionedImage> make_dataset(int n, std::uint64_t seed, int image_size = 32);

/// Writes images/NNNNNN.png and manifest.tsv (index, caption, spec, image path).
void write_dataset(const std::vector<CaptionedImage>& items, const std::filesystem::path& dir);

struct PromptSplit {
  std::vector<std::string> seen;
  std::vector<std::string> unseen;
};

/// Prompts for one capability; unseen prompts use held-out combinations.
PromptSplit prompt_splits(Task task);

}  // namespace texforce
