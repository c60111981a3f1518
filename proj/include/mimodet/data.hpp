#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimodet/geometry.hpp"

// Synthetic detection benchmark: colored shapes (circle / square / triangle)
// on textured backgrounds, plus the augmentations and the corruption suite
// used for out-of-distribution evaluation. Everything is deterministic in
// the seeds it is handed; sample i of a dataset depends only on (seed, i).

namespace mimodet::data {

struct Image {
  int width = 0, height = 0;
  std::vector<float> px;  // HWC, RGB, values in [0,1]

  float& at(int x, int y, int c) { return px[(std::size_t(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return px[(std::size_t(y) * width + x) * 3 + c]; }
};

struct Annotation {
  geom::Box box;
  int category = 0;
};

struct Sample {
  Image image;
  std::vector<Annotation> annotations;
};

inline const char* kClassNames[] = {"circle", "square", "triangle"};
constexpr int kNumClasses = 3;

struct SceneConfig {
  int width = 64, height = 64;
  int min_objects = 1, max_objects = 4;
  double min_size = 12.0, max_size = 28.0;  // clamped to >= 8 px sides
  double texture_amplitude = 0.15;
  std::uint64_t seed = 0;
};

constexpr double kMaxPairwiseIou = 0.3;
constexpr double kMinObjectSide = 8.0;

Sample generate_sample(const SceneConfig& cfg, std::uint64_t index);
std::vector<Sample> generate_dataset(const SceneConfig& cfg, int n);

Sample flip_horizontal(const Sample& s);

// Brightness, contrast about the mean, saturation about per-pixel luma, hue
// rotation, applied in that order with factors drawn from +-0.4*strength
// (hue +-0.1*strength turns); result clamped to [0,1].
Image color_jitter(const Image& img, double strength, std::uint64_t seed);

enum class CorruptionKind { gaussian_noise, blur, brightness_contrast, snow_dots };

inline const CorruptionKind kAllCorruptions[] = {
    CorruptionKind::gaussian_noise, CorruptionKind::blur,
    CorruptionKind::brightness_contrast, CorruptionKind::snow_dots};

const char* corruption_name(CorruptionKind kind);
CorruptionKind corruption_from_name(const std::string& name);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 3;  // 1..5
  std::uint64_t seed = 0;
};

// The scalar that grows strictly with severity (sigma, blur variance,
// brightness shift, dot count).
double corruption_magnitude(CorruptionKind kind, int severity);

Image corrupt(const Image& img, const CorruptionSpec& spec);

// Binary PPM (P6, maxval 255).
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

// dir/images/img_#####.ppm plus dir/annotations.json in the COCO-like
// corner-box schema. Round-trips exactly up to 8-bit pixel quantization.
void write_dataset(const std::vector<Sample>& samples, const std::string& dir);
std::vector<Sample> read_dataset(const std::string& dir);

}  // namespace mimodet::data
