// SPDX-License-Identifier: Apache-2.0
#include "texforce/rewards.hpp"

#include <jpeglib.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <queue>
#include <sstream>

namespace texforce {

// ---------------------------------------------------------------- JPEG

namespace {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void on_jpeg_error(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality) {
  if (image.height <= 0 || image.width <= 0) throw RewardError("jpeg: empty image");
  const auto pixels = quantize(image);

  jpeg_compress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = on_jpeg_error;
  unsigned char* buffer = nullptr;
  unsigned long size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(buffer);
    throw RewardError(std::string("jpeg encoding failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &buffer, &size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.optimize_coding = FALSE;
  cinfo.comp_info[0].h_samp_factor = 2;
  cinfo.comp_info[0].v_samp_factor = 2;
  for (int c = 1; c < 3; ++c) {
    cinfo.comp_info[c].h_samp_factor = 1;
    cinfo.comp_info[c].v_samp_factor = 1;
  }
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(pixels.data() + static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<std::uint8_t> out(buffer, buffer + size);
  jpeg_destroy_compress(&cinfo);
  std::free(buffer);
  return out;
}

std::string jpeg_codec_identity() {
#ifdef LIBJPEG_TURBO_VERSION_NUMBER
  return "libjpeg-turbo " + std::to_string(LIBJPEG_TURBO_VERSION_NUMBER) + " (jpeglib API " +
         std::to_string(JPEG_LIB_VERSION) + ")";
#else
  return "libjpeg API " + std::to_string(JPEG_LIB_VERSION);
#endif
}

double incompressibility(const Image& image, int quality) {
  return static_cast<double>(encode_jpeg(image, quality).size()) / 1024.0;
}

double compressibility(const Image& image, int quality) { return -incompressibility(image, quality); }

// ---------------------------------------------------------------- segmentation

std::vector<std::uint8_t> foreground_mask(const Image& image, const RewardConfig& config) {
  std::vector<std::uint8_t> mask(image.pixels(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    for (int c = 0; c < 3; ++c)
      if (std::abs(image.data[i * 3 + c] - kBackground) > config.foreground_threshold) mask[i] = 1;
  return mask;
}

Color nearest_palette_color(float r, float g, float b) {
  Color best = Color::red;
  float best_d = 1e30f;
  for (auto c : kColors) {
    const auto p = palette_rgb(c);
    const float d = (r - p[0]) * (r - p[0]) + (g - p[1]) * (g - p[1]) + (b - p[2]) * (b - p[2]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace {

Color pixel_color(const Image& image, std::size_t i) {
  return nearest_palette_color(std::clamp(image.data[i * 3], 0.0f, 1.0f),
                               std::clamp(image.data[i * 3 + 1], 0.0f, 1.0f),
                               std::clamp(image.data[i * 3 + 2], 0.0f, 1.0f));
}

/// Square fills its box; otherwise a triangle (apex up) is much narrower in
/// its top third than its bottom third, while a circle is symmetric.
ShapeKind classify(const std::vector<std::pair<int, int>>& pixels, const Component& c) {
  const int w = c.x1 - c.x0 + 1, h = c.y1 - c.y0 + 1;
  const double fill = static_cast<double>(c.area) / (static_cast<double>(w) * h);
  if (fill >= 0.92) return ShapeKind::square;
  std::vector<int> widths(static_cast<std::size_t>(h), 0);
  for (auto [y, x] : pixels) ++widths[static_cast<std::size_t>(y - c.y0)];
  const int third = std::max(1, h / 3);
  double top = 0, bottom = 0;
  for (int i = 0; i < third; ++i) {
    top += widths[static_cast<std::size_t>(i)];
    bottom += widths[static_cast<std::size_t>(h - 1 - i)];
  }
  return top < 0.6 * bottom ? ShapeKind::triangle : ShapeKind::circle;
}

}  // namespace

std::vector<Component> find_components(const Image& image, const RewardConfig& config) {
  const auto mask = foreground_mask(image, config);
  std::vector<int> label(mask.size(), -1);
  std::vector<Component> out;
  const int h = image.height, w = image.width;
  for (int start = 0; start < h * w; ++start) {
    if (!mask[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0) continue;
    std::vector<std::pair<int, int>> pixels;
    std::queue<int> frontier;
    frontier.push(start);
    label[static_cast<std::size_t>(start)] = 0;
    while (!frontier.empty()) {
      const int p = frontier.front();
      frontier.pop();
      const int y = p / w, x = p % w;
      pixels.emplace_back(y, x);
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const auto q = static_cast<std::size_t>(n[0] * w + n[1]);
        if (mask[q] && label[q] < 0) {
          label[q] = 0;
          frontier.push(n[0] * w + n[1]);
        }
      }
    }
    if (static_cast<int>(pixels.size()) < config.min_component_area) continue;
    Component c;
    c.area = static_cast<int>(pixels.size());
    c.x0 = w;
    c.y0 = h;
    std::array<int, 5> votes{};
    for (auto [y, x] : pixels) {
      c.x0 = std::min(c.x0, x);
      c.x1 = std::max(c.x1, x);
      c.y0 = std::min(c.y0, y);
      c.y1 = std::max(c.y1, y);
      c.cx += x;
      c.cy += y;
      ++votes[static_cast<std::size_t>(pixel_color(image, static_cast<std::size_t>(y * w + x)))];
    }
    c.cx /= c.area;
    c.cy /= c.area;
    c.color = static_cast<Color>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    c.kind = classify(pixels, c);
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------- oracles

namespace {

ParsedCaption parse_or_throw(const std::string& prompt) {
  auto parsed = parse_caption(prompt);
  if (!parsed) throw RewardError("prompt does not parse under the caption grammar: \"" + prompt + "\"");
  return *parsed;
}

}  // namespace

double color_consistency(const Image& image, const std::string& prompt, const RewardConfig& config) {
  const auto parsed = parse_or_throw(prompt);
  const auto colors = parsed.colors();
  if (colors.size() != 1) throw RewardError("color reward needs a prompt naming exactly one color");
  const auto mask = foreground_mask(image, config);
  std::size_t foreground = 0, matching = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++foreground;
    if (pixel_color(image, i) == colors.front()) ++matching;
  }
  if (foreground < 10) return 0.0;
  return static_cast<double>(matching) / static_cast<double>(foreground);
}

double object_count(const Image& image, const std::string& prompt, const RewardConfig& config) {
  const auto parsed = parse_or_throw(prompt);
  const auto count = static_cast<int>(find_components(image, config).size());
  return std::exp(-std::abs(count - parsed.total_count()));
}

double composition(const Image& image, const std::string& prompt, const RewardConfig& config) {
  const auto parsed = parse_or_throw(prompt);
  const auto components = find_components(image, config);
  int detected = 0;
  for (const auto& g : parsed.groups) {
    const bool found = std::any_of(components.begin(), components.end(), [&](const Component& c) {
      return c.color == g.color && c.kind == g.kind;
    });
    detected += found ? 1 : 0;
  }
  return static_cast<double>(detected) / static_cast<double>(parsed.groups.size());
}

double location(const Image& image, const std::string& prompt, const RewardConfig& config) {
  const auto parsed = parse_or_throw(prompt);
  if (parsed.position == Position::anywhere) throw RewardError("location reward needs a position phrase");
  const auto mask = foreground_mask(image, config);
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      if (mask[static_cast<std::size_t>(y * image.width + x)]) {
        sx += x;
        sy += y;
        ++n;
      }
  if (n < 10) return 0.0;
  // Pixel centers sit at x + 0.5; boundaries are at multiples of size/2 or size/4.
  const double cx = sx / static_cast<double>(n) + 0.5, cy = sy / static_cast<double>(n) + 0.5;
  const double w = image.width, h = image.height;
  constexpr double band = 2.0;
  // Signed distance of the centroid inside the prompted region (positive = inside).
  double inside = 0.0;
  switch (parsed.position) {
    case Position::left: inside = w / 2 - cx; break;
    case Position::right: inside = cx - w / 2; break;
    case Position::top: inside = h / 2 - cy; break;
    case Position::bottom: inside = cy - h / 2; break;
    case Position::center:
      inside = std::min({cx - w / 4, 3 * w / 4 - cx, cy - h / 4, 3 * h / 4 - cy});
      break;
    case Position::anywhere: break;
  }
  if (inside > band) return 1.0;
  if (inside >= -band) return 0.5;
  return 0.0;
}

// ---------------------------------------------------------------- external scorer

namespace {

std::filesystem::path unique_temp_png() {
  static std::atomic<std::uint64_t> counter{0};
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  return std::filesystem::temp_directory_path() /
         ("texforce-score-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
          std::to_string(stamp) + ".png");
}

double run_scorer(const std::string& command, const std::filesystem::path& image_path,
                  const std::string& prompt, double timeout_seconds) {
  int out_pipe[2];
  if (::pipe(out_pipe) != 0) throw RewardError("external scorer: pipe() failed");
  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    throw RewardError("external scorer: fork() failed");
  }
  if (pid == 0) {
    ::setpgid(0, 0);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    const std::string path = image_path.string();
    ::execl("/bin/sh", "sh", "-c", command.c_str(), "texforce-scorer", path.c_str(), prompt.c_str(),
            static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  ::close(out_pipe[1]);

  std::string output;
  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(timeout_seconds));
  bool timed_out = false;
  char buf[256];
  while (true) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now()).count();
    if (left <= 0) {
      timed_out = true;
      break;
    }
    pollfd pfd{out_pipe[0], POLLIN, 0};
    const int ready = ::poll(&pfd, 1, static_cast<int>(left));
    if (ready == 0) {
      timed_out = true;
      break;
    }
    if (ready < 0) continue;
    const ssize_t got = ::read(out_pipe[0], buf, sizeof(buf));
    if (got <= 0) break;
    output.append(buf, static_cast<std::size_t>(got));
  }
  ::close(out_pipe[0]);
  if (timed_out) {
    ::kill(-pid, SIGKILL);
    ::waitpid(pid, nullptr, 0);
    throw RewardError("external scorer timed out after " + std::to_string(timeout_seconds) + " s");
  }
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw RewardError("external scorer exited with failure status");

  std::istringstream in(output);
  std::string token, extra;
  if (!(in >> token) || (in >> extra)) throw RewardError("external scorer output is not a single number: " + output);
  char* end = nullptr;
  const double value = std::strtod(token.c_str(), &end);
  if (end != token.c_str() + token.size() || !std::isfinite(value))
    throw RewardError("external scorer output is not a decimal: " + token);
  return value;
}

}  // namespace

RewardSpec external_score(const std::string& command, double timeout_seconds) {
  RewardSpec spec;
  spec.name = "external:" + command;
  spec.differentiable = false;
  spec.nominal_range = {-1e300, 1e300};
  spec.fn = [command, timeout_seconds](const Image& image, const std::string& prompt) {
    const auto path = unique_temp_png();
    write_png(image, path);
    try {
      const double v = run_scorer(command, path, prompt, timeout_seconds);
      std::filesystem::remove(path);
      return v;
    } catch (...) {
      std::error_code ec;
      std::filesystem::remove(path, ec);
      throw;
    }
  };
  return spec;
}

RewardSpec target_mse_reward(Image target) {
  RewardSpec spec;
  spec.name = "target_mse";
  spec.differentiable = true;
  spec.nominal_range = {-static_cast<double>(target.data.size()), 0.0};
  spec.fn = [target](const Image& image, const std::string&) {
    if (image.data.size() != target.data.size()) throw RewardError("target_mse: shape mismatch");
    double s = 0;
    for (std::size_t i = 0; i < image.data.size(); ++i) {
      const double d = image.data[i] - target.data[i];
      s += d * d;
    }
    return -s;
  };
  spec.gradient = [target](const Image& image, const std::string&) {
    Image g = image;
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = -2.0f * (image.data[i] - target.data[i]);
    return g;
  };
  return spec;
}

RewardSpec make_reward(const std::string& name, const RewardConfig& config) {
  RewardSpec spec;
  spec.name = name;
  const int q = config.jpeg_quality;
  if (name == "incompressibility") {
    spec.fn = [q](const Image& im, const std::string&) { return incompressibility(im, q); };
    spec.nominal_range = {0.0, 8.0};
  } else if (name == "compressibility") {
    spec.fn = [q](const Image& im, const std::string&) { return compressibility(im, q); };
    spec.nominal_range = {-8.0, 0.0};
  } else if (name == "color") {
    spec.fn = [config](const Image& im, const std::string& p) { return color_consistency(im, p, config); };
  } else if (name == "count") {
    spec.fn = [config](const Image& im, const std::string& p) { return object_count(im, p, config); };
  } else if (name == "composition") {
    spec.fn = [config](const Image& im, const std::string& p) { return composition(im, p, config); };
  } else if (name == "location") {
    spec.fn = [config](const Image& im, const std::string& p) { return location(im, p, config); };
  } else if (name.rfind("external:", 0) == 0) {
    return external_score(name.substr(9), config.external_timeout_seconds);
  } else {
    throw Error("unknown reward: " + name);
  }
  return spec;
}

}  // namespace texforce
