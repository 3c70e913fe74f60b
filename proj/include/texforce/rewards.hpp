// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "texforce/image.hpp"
#include "texforce/tensor.hpp"
#include "texforce/toy_world.hpp"

namespace texforce {

/// Raised when a reward cannot be evaluated (bad prompt, codec or scorer
/// failure). Distinct from a legitimate score of zero.
class RewardError : public Error {
 public:
  using Error::Error;
};

struct RewardConfig {
  float foreground_threshold = 0.15f;
  int min_component_area = 8;
  int jpeg_quality = 95;
  double external_timeout_seconds = 30.0;
};

/// A scorer mapping (image in [0,1], prompt) to a scalar. `gradient` is set
/// only for differentiable rewards and returns dR/dimage.
struct RewardSpec {
  std::string name;
  bool differentiable = false;
  std::function<double(const Image&, const std::string&)> fn;
  std::pair<double, double> nominal_range{0.0, 1.0};
  std::function<Image(const Image&, const std::string&)> gradient;

  double operator()(const Image& image, const std::string& prompt) const { return fn(image, prompt); }
};

// ---------------------------------------------------------------- JPEG size

/// Baseline-sequential JPEG, 4:2:0 chroma subsampling.
std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality = 95);
/// Codec name and version the byte counts were produced with.
std::string jpeg_codec_identity();

/// Encoded size in kilobytes (bytes / 1024) at the given quality.
double incompressibility(const Image& image, int quality = 95);
double compressibility(const Image& image, int quality = 95);

// ---------------------------------------------------------------- alignment oracles

struct Component {
  int area = 0;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive bounding box
  double cx = 0.0, cy = 0.0;
  Color color = Color::red;     // majority nearest-palette color
  ShapeKind kind = ShapeKind::circle;
};

std::vector<std::uint8_t> foreground_mask(const Image& image, const RewardConfig& config = {});
Color nearest_palette_color(float r, float g, float b);
/// 4-connected foreground components with area >= min_component_area.
std::vector<Component> find_components(const Image& image, const RewardConfig& config = {});

double color_consistency(const Image& image, const std::string& prompt, const RewardConfig& config = {});
double object_count(const Image& image, const std::string& prompt, const RewardConfig& config = {});
double composition(const Image& image, const std::string& prompt, const RewardConfig& config = {});
double location(const Image& image, const std::string& prompt, const RewardConfig& config = {});

// ---------------------------------------------------------------- registry

/// Wraps an external scorer. The command runs under /bin/sh with the image
/// path and prompt as $1 and $2, and must print exactly one decimal number.
RewardSpec external_score(const std::string& command, double timeout_seconds = 30.0);

/// Differentiable reward R = -||image - target||^2, for the direct
/// backpropagation baseline.
RewardSpec target_mse_reward(Image target);

/// Names: incompressibility, compressibility, color, count, composition,
/// location, external:<command>.
RewardSpec make_reward(const std::string& name, const RewardConfig& config = {});

}  // namespace texforce
