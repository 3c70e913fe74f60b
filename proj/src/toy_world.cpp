// SPDX-License-Identifier: Apache-2.0
#include "texforce/toy_world.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "texforce/tensor.hpp"

namespace texforce {

namespace {

const std::array<const char*, 5> kCountWords{"", "a", "two", "three", "four"};

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(const std::array<Enum, N>& values, const std::string& word) {
  for (auto v : values)
    if (to_string(v) == word) return v;
  return std::nullopt;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  for (std::string w; in >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    words.push_back(w);
  }
  return words;
}

struct Box {
  int x0, y0, x1, y1;
};

/// Valid center range along one axis for a shape of radius r inside [lo, hi).
std::pair<int, int> axis_range(int lo, int hi, int r) { return {lo + r, hi - 1 - r}; }

std::pair<Box, bool> center_box(Position p, int size, int r) {
  const int half = size / 2, quarter = size / 4;
  std::pair<int, int> xr = axis_range(0, size, r), yr = axis_range(0, size, r);
  switch (p) {
    case Position::left: xr = axis_range(0, half, r); break;
    case Position::right: xr = axis_range(half, size, r); break;
    case Position::top: yr = axis_range(0, half, r); break;
    case Position::bottom: yr = axis_range(half, size, r); break;
    case Position::center:
      xr = axis_range(quarter, size - quarter, r);
      yr = axis_range(quarter, size - quarter, r);
      break;
    case Position::anywhere: break;
  }
  const Box b{xr.first, yr.first, xr.second, yr.second};
  return {b, b.x0 <= b.x1 && b.y0 <= b.y1};
}

bool separated(const PlacedShape& a, const PlacedShape& b) {
  const int gap = a.radius + b.radius + 3;  // >= 2 background pixels between bounding boxes
  return std::abs(a.cx - b.cx) >= gap || std::abs(a.cy - b.cy) >= gap;
}

}  // namespace

std::array<float, 3> palette_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.0f, 0.0f, 0.0f};
    case Color::green: return {0.0f, 1.0f, 0.0f};
    case Color::blue: return {0.0f, 0.0f, 1.0f};
    case Color::yellow: return {1.0f, 1.0f, 0.0f};
    case Color::purple: return {0.8f, 0.0f, 0.8f};
  }
  return {0.0f, 0.0f, 0.0f};
}

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

std::string to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::purple: return "purple";
  }
  return "?";
}

std::string to_string(Position p) {
  switch (p) {
    case Position::anywhere: return "anywhere";
    case Position::left: return "left";
    case Position::right: return "right";
    case Position::top: return "top";
    case Position::bottom: return "bottom";
    case Position::center: return "center";
  }
  return "?";
}

std::string to_string(Task t) {
  switch (t) {
    case Task::color: return "color";
    case Task::composition: return "composition";
    case Task::count: return "count";
    case Task::location: return "location";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (auto t : {Task::color, Task::composition, Task::count, Task::location})
    if (to_string(t) == name) return t;
  throw Error("unknown task: " + name);
}

int ParsedCaption::total_count() const {
  int n = 0;
  for (const auto& g : groups) n += g.count;
  return n;
}

std::vector<Color> ParsedCaption::colors() const {
  std::vector<Color> out;
  for (const auto& g : groups)
    if (std::find(out.begin(), out.end(), g.color) == out.end()) out.push_back(g.color);
  return out;
}

std::optional<ParsedCaption> parse_caption(const std::string& text) {
  const auto words = split_words(text);
  ParsedCaption parsed;
  std::size_t i = 0;
  while (true) {
    if (i + 3 > words.size()) return std::nullopt;
    CaptionGroup g;
    auto count = std::find(kCountWords.begin() + 1, kCountWords.end(), words[i]);
    if (count == kCountWords.end()) return std::nullopt;
    g.count = static_cast<int>(count - kCountWords.begin());
    auto color = lookup(kColors, words[i + 1]);
    if (!color) return std::nullopt;
    g.color = *color;
    std::string noun = words[i + 2];
    const bool plural = g.count > 1;
    if (plural) {
      if (noun.empty() || noun.back() != 's') return std::nullopt;
      noun.pop_back();
    }
    auto kind = lookup(kShapes, noun);
    if (!kind) return std::nullopt;
    g.kind = *kind;
    parsed.groups.push_back(g);
    i += 3;
    if (i == words.size()) return parsed;
    if (words[i] == "and") {
      ++i;
      continue;
    }
    if (words[i] == "on" && i + 3 == words.size() && words[i + 1] == "the") {
      auto pos = lookup(kPositions, words[i + 2]);
      if (!pos) return std::nullopt;
      parsed.position = *pos;
      return parsed;
    }
    return std::nullopt;
  }
}

std::string format_caption(const ParsedCaption& caption) {
  std::string out;
  for (std::size_t i = 0; i < caption.groups.size(); ++i) {
    const auto& g = caption.groups[i];
    if (i) out += " and ";
    out += std::string(kCountWords.at(g.count)) + " " + to_string(g.color) + " " + to_string(g.kind);
    if (g.count > 1) out += "s";
  }
  if (caption.position != Position::anywhere) out += " on the " + to_string(caption.position);
  return out;
}

std::vector<std::string> grammar_words() {
  std::vector<std::string> words{"a", "two", "three", "four", "and", "on", "the"};
  for (auto c : kColors) words.push_back(to_string(c));
  for (auto s : kShapes) {
    words.push_back(to_string(s));
    words.push_back(to_string(s) + "s");
  }
  for (auto p : kPositions) words.push_back(to_string(p));
  return words;
}

std::vector<std::string> enumerate_captions() {
  std::vector<std::string> out;
  auto single = [&](int count, Color c, ShapeKind s, Position p) {
    out.push_back(format_caption({{{count, c, s}}, p}));
  };
  for (auto c : kColors)
    for (auto s : kShapes) {
      for (int n = 1; n <= 4; ++n) single(n, c, s, Position::anywhere);
      for (auto p : kPositions) {
        single(1, c, s, p);
        if (p != Position::center) single(2, c, s, p);
      }
    }
  for (auto c1 : kColors)
    for (auto s1 : kShapes)
      for (auto c2 : kColors)
        for (auto s2 : kShapes) {
          if (c1 == c2 && s1 == s2) continue;
          for (auto [n1, n2] : {std::pair{1, 1}, std::pair{1, 2}, std::pair{2, 1}})
            out.push_back(format_caption({{{n1, c1, s1}, {n2, c2, s2}}, Position::anywhere}));
        }
  return out;
}

bool covers(const PlacedShape& s, int y, int x) {
  const int dx = x - s.cx, dy = y - s.cy, r = s.radius;
  switch (s.kind) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r + r;
    case ShapeKind::square: return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::triangle: {
      const int row = dy + r;  // 0 at the apex, 2r at the base
      return row >= 0 && row <= 2 * r && 2 * std::abs(dx) <= row;
    }
  }
  return false;
}

Image render(const SceneSpec& spec) {
  Image image(spec.image_size, spec.image_size, spec.background);
  for (const auto& s : spec.shapes) {
    const auto rgb = palette_rgb(s.color);
    for (int y = std::max(0, s.cy - s.radius); y <= std::min(spec.image_size - 1, s.cy + s.radius); ++y)
      for (int x = std::max(0, s.cx - s.radius); x <= std::min(spec.image_size - 1, s.cx + s.radius); ++x)
        if (covers(s, y, x))
          for (int c = 0; c < 3; ++c) image.at(y, x, c) = rgb[c];
  }
  return image;
}

std::string caption_for(const SceneSpec& spec) {
  ParsedCaption caption;
  for (const auto& s : spec.shapes) {
    auto it = std::find_if(caption.groups.begin(), caption.groups.end(), [&](const CaptionGroup& g) {
      return g.color == s.color && g.kind == s.kind;
    });
    if (it == caption.groups.end())
      caption.groups.push_back({1, s.color, s.kind});
    else
      ++it->count;
  }
  if (!spec.shapes.empty()) {
    const Position p = spec.shapes.front().position;
    const bool shared = std::all_of(spec.shapes.begin(), spec.shapes.end(),
                                    [&](const PlacedShape& s) { return s.position == p; });
    if (shared) caption.position = p;
  }
  return format_caption(caption);
}

std::string spec_to_text(const SceneSpec& spec) {
  std::ostringstream out;
  out << "size=" << spec.image_size << ";bg=" << std::setprecision(9) << spec.background
      << ";shapes=";
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    if (i) out << '|';
    out << to_string(s.kind) << ':' << to_string(s.color) << ':' << to_string(s.position) << ':'
        << s.cx << ':' << s.cy << ':' << s.radius;
  }
  return out.str();
}

SceneSpec spec_from_text(const std::string& text) {
  SceneSpec spec;
  spec.shapes.clear();
  std::istringstream fields(text);
  for (std::string field; std::getline(fields, field, ';');) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw Error("bad scene spec field: " + field);
    const auto key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "size") {
      spec.image_size = std::stoi(value);
    } else if (key == "bg") {
      spec.background = std::stof(value);
    } else if (key == "shapes") {
      std::istringstream items(value);
      for (std::string item; std::getline(items, item, '|');) {
        std::vector<std::string> parts;
        std::istringstream ps(item);
        for (std::string p; std::getline(ps, p, ':');) parts.push_back(p);
        if (parts.size() != 6) throw Error("bad shape record: " + item);
        PlacedShape s;
        auto kind = lookup(kShapes, parts[0]);
        auto color = lookup(kColors, parts[1]);
        if (!kind || !color) throw Error("bad shape record: " + item);
        s.kind = *kind;
        s.color = *color;
        s.position = parts[2] == "anywhere" ? Position::anywhere : [&] {
          auto p = lookup(kPositions, parts[2]);
          if (!p) throw Error("bad position: " + parts[2]);
          return *p;
        }();
        s.cx = std::stoi(parts[3]);
        s.cy = std::stoi(parts[4]);
        s.radius = std::stoi(parts[5]);
        spec.shapes.push_back(s);
      }
    } else {
      throw Error("unknown scene spec key: " + key);
    }
  }
  return spec;
}

CaptionedImage generate_scene(std::uint64_t seed, Difficulty difficulty, int image_size) {
  Rng rng(seed);
  auto pick = [&](int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); };

  // Layout: list of (color, shape, count) groups plus a shared position.
  std::vector<CaptionGroup> groups;
  Position position = Position::anywhere;
  auto random_group = [&](int count) {
    return CaptionGroup{count, kColors[pick(5)], kShapes[pick(3)]};
  };
  if (difficulty == Difficulty::single) {
    groups.push_back(random_group(1));
    if (pick(2)) position = kPositions[pick(5)];
  } else {
    switch (pick(3)) {
      case 0: groups.push_back(random_group(2 + pick(3))); break;
      case 1: {
        const std::array<std::pair<int, int>, 3> counts{{{1, 1}, {1, 2}, {2, 1}}};
        const auto [n1, n2] = counts[pick(3)];
        groups.push_back(random_group(n1));
        CaptionGroup second;
        do second = random_group(n2);
        while (second.color == groups[0].color && second.kind == groups[0].kind);
        groups.push_back(second);
        break;
      }
      default: {
        const int count = 1 + pick(2);
        groups.push_back(random_group(count));
        position = kPositions[pick(count == 1 ? 5 : 4)];
        break;
      }
    }
  }

  int total = 0;
  for (const auto& g : groups) total += g.count;
  const int max_radius = total >= 3 ? 4 : 5;
  // Greedy placement can paint itself into a corner; restart the layout then.
  SceneSpec spec;
  spec.image_size = image_size;
  for (int restart = 0; restart < 100; ++restart) {
    spec.shapes.clear();
    bool complete = true;
    for (const auto& g : groups)
      for (int k = 0; k < g.count && complete; ++k) {
        PlacedShape s{g.kind, g.color, position, 0, 0, 4 + pick(max_radius - 3)};
        const auto [box, ok] = center_box(position, image_size, s.radius);
        if (!ok) throw Error("scene does not fit in a " + std::to_string(image_size) + "px image");
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
          s.cx = std::uniform_int_distribution<int>(box.x0, box.x1)(rng);
          s.cy = std::uniform_int_distribution<int>(box.y0, box.y1)(rng);
          placed = std::all_of(spec.shapes.begin(), spec.shapes.end(),
                               [&](const PlacedShape& o) { return separated(s, o); });
        }
        if (placed) spec.shapes.push_back(s);
        else complete = false;
      }
    if (complete) break;
  }
  if (static_cast<int>(spec.shapes.size()) != total) throw Error("shape placement failed after 100 layouts");

  CaptionedImage out;
  out.image = render(spec);
  out.caption = caption_for(spec);
  out.spec = std::move(spec);
  return out;
}

std::vector<CaptionedImage> make_dataset(int n, std::uint64_t seed, int image_size) {
  if (n <= 0) throw Error("dataset size must be positive");
  std::vector<CaptionedImage> items;
  items.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    items.push_back(generate_scene(derive_seed(seed, 1, static_cast<std::uint64_t>(i)),
                                   i % 2 ? Difficulty::multi : Difficulty::single, image_size));
  return items;
}

void write_dataset(const std::vector<CaptionedImage>& items, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.tsv", std::ios::binary);
  if (!manifest) throw Error("cannot write manifest in " + dir.string());
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
    write_png(items[i].image, dir / name.str());
    manifest << i << '\t' << items[i].caption << '\t' << spec_to_text(items[i].spec) << '\t'
             << name.str() << '\n';
  }
}

PromptSplit prompt_splits(Task task) {
  PromptSplit split;
  auto add = [&](bool held_out, const ParsedCaption& c, std::size_t seen_cap, std::size_t unseen_cap) {
    auto& list = held_out ? split.unseen : split.seen;
    if (list.size() < (held_out ? unseen_cap : seen_cap)) list.push_back(format_caption(c));
  };
  switch (task) {
    case Task::color:
      for (int ci = 0; ci < 5; ++ci)
        for (int si = 0; si < 3; ++si)
          add((ci + si) % 3 == 0, {{{1, kColors[ci], kShapes[si]}}, Position::anywhere}, 99, 99);
      break;
    case Task::composition:
      for (int s1 = 0; s1 < 3; ++s1)
        for (int s2 = s1 + 1; s2 < 3; ++s2)
          for (int c1 = 0; c1 < 5; ++c1)
            for (int c2 = 0; c2 < 5; ++c2) {
              if (c1 == c2) continue;
              add((c1 + 2 * c2 + s1 + s2) % 4 == 0,
                  {{{1, kColors[c1], kShapes[s1]}, {1, kColors[c2], kShapes[s2]}}, Position::anywhere},
                  10, 5);
            }
      break;
    case Task::count:
      for (int ci = 0; ci < 5; ++ci)
        for (int si = 0; si < 3; ++si)
          for (int n = 2; n <= 4; ++n)
            add((ci + si + n) % 3 == 0, {{{n, kColors[ci], kShapes[si]}}, Position::anywhere}, 10, 5);
      break;
    case Task::location:
      for (int ci = 0; ci < 5; ++ci)
        for (int si = 0; si < 3; ++si)
          for (int pi = 0; pi < 5; ++pi)
            add((ci + si + pi) % 3 == 0, {{{1, kColors[ci], kShapes[si]}}, kPositions[pi]}, 10, 5);
      break;
  }
  return split;
}

}  // namespace texforce
