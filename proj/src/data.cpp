#include "mimodet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "mimodet/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace mimodet::data {

namespace {

float clamp01(double v) { return float(std::min(std::max(v, 0.0), 1.0)); }

void fill_background(Image& img, Rng& rng, double amplitude) {
  double base[3], fx[3][2], fy[3][2], ph[3][2];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.65);
    for (int k = 0; k < 2; ++k) {
      fx[c][k] = rng.uniform(0.05, 0.35);
      fy[c][k] = rng.uniform(0.05, 0.35);
      ph[c][k] = rng.uniform(0.0, 6.28318530717958647692);
    }
  }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double t = 0;
        for (int k = 0; k < 2; ++k)
          t += 0.5 * std::sin(fx[c][k] * x + fy[c][k] * y + ph[c][k]);
        img.at(x, y, c) = clamp01(base[c] + amplitude * t);
      }
}

struct Placed {
  geom::Box box;
  int category;
  float color[3];
};

void draw_shape(Image& img, const Placed& p) {
  const auto& b = p.box;
  const int x_lo = std::max(0, int(std::floor(b.x1)));
  const int x_hi = std::min(img.width - 1, int(std::ceil(b.x2)));
  const int y_lo = std::max(0, int(std::floor(b.y1)));
  const int y_hi = std::min(img.height - 1, int(std::ceil(b.y2)));
  const double cx = b.cx(), cy = b.cy();
  const double rx = 0.5 * b.width(), ry = 0.5 * b.height();
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      switch (p.category) {
        case 0: {  // circle (ellipse when the box is not square)
          const double dx = (px - cx) / rx, dy = (py - cy) / ry;
          inside = dx * dx + dy * dy <= 1.0;
          break;
        }
        case 1:  // square
          inside = px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2;
          break;
        case 2: {  // isoceles triangle, apex top-center
          if (py >= b.y1 && py < b.y2) {
            const double t = (py - b.y1) / (b.y2 - b.y1);  // 0 apex .. 1 base
            const double half = t * rx;
            inside = px >= cx - half && px <= cx + half;
          }
          break;
        }
        default:
          break;
      }
      if (inside)
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = p.color[c];
    }
  }
}

}  // namespace

Sample generate_sample(const SceneConfig& cfg, std::uint64_t index) {
  Rng rng(mix_seed(cfg.seed, index));
  Sample s;
  s.image.width = cfg.width;
  s.image.height = cfg.height;
  s.image.px.assign(std::size_t(cfg.width) * cfg.height * 3, 0.0f);
  fill_background(s.image, rng, cfg.texture_amplitude);

  double bg_mean[3] = {0, 0, 0};
  for (std::size_t i = 0; i < s.image.px.size(); i += 3)
    for (int c = 0; c < 3; ++c) bg_mean[c] += s.image.px[i + c];
  for (int c = 0; c < 3; ++c) bg_mean[c] /= double(cfg.width) * cfg.height;

  const double lo = std::max(kMinObjectSide, cfg.min_size);
  const double hi = std::max(lo, cfg.max_size);
  const int want = int(rng.uniform_int(cfg.min_objects, cfg.max_objects));

  std::vector<Placed> placed;
  for (int obj = 0; obj < want; ++obj) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const int category = int(rng.uniform_int(0, kNumClasses - 1));
      const double w = rng.uniform(lo, std::min(hi, double(cfg.width)));
      double h = w;
      if (category == 2)
        h = std::min(std::max(w * rng.uniform(0.75, 1.3), kMinObjectSide),
                     double(cfg.height));
      const double x1 = rng.uniform(0.0, cfg.width - w);
      const double y1 = rng.uniform(0.0, cfg.height - h);
      const geom::Box box{x1, y1, x1 + w, y1 + h};
      bool overlaps = false;
      for (const auto& q : placed)
        if (geom::iou(box, q.box) > kMaxPairwiseIou) overlaps = true;
      if (overlaps) continue;

      Placed p;
      p.box = box;
      p.category = category;
      for (int trial = 0; trial < 50; ++trial) {
        double l1 = 0;
        for (int c = 0; c < 3; ++c) {
          p.color[c] = float(rng.uniform(0.0, 1.0));
          l1 += std::abs(double(p.color[c]) - bg_mean[c]);
        }
        if (l1 >= 0.75) break;
        if (trial == 49)
          for (int c = 0; c < 3; ++c) p.color[c] = float(1.0 - bg_mean[c]);
      }
      placed.push_back(p);
      ok = true;
    }
    // Unplaceable object: the scene simply carries fewer objects.
  }

  for (const auto& p : placed) {
    draw_shape(s.image, p);
    s.annotations.push_back({p.box, p.category});
  }
  return s;
}

std::vector<Sample> generate_dataset(const SceneConfig& cfg, int n) {
  if (n <= 0) throw std::invalid_argument("generate_dataset: n must be positive");
  std::vector<Sample> out;
  out.reserve(std::size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_sample(cfg, std::uint64_t(i)));
  return out;
}

Sample flip_horizontal(const Sample& s) {
  Sample o;
  o.image.width = s.image.width;
  o.image.height = s.image.height;
  o.image.px.resize(s.image.px.size());
  const int w = s.image.width;
  for (int y = 0; y < s.image.height; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) o.image.at(x, y, c) = s.image.at(w - 1 - x, y, c);
  o.annotations = s.annotations;
  for (auto& a : o.annotations) {
    const double x1 = a.box.x1, x2 = a.box.x2;
    a.box.x1 = w - x2;
    a.box.x2 = w - x1;
  }
  return o;
}

Image color_jitter(const Image& img, double strength, std::uint64_t seed) {
  if (strength < 0 || strength > 1)
    throw std::invalid_argument("color_jitter: strength outside [0,1]");
  Rng rng(mix_seed(seed, 0x6a69747465720000ull));
  const double b = 1.0 + rng.uniform(-0.4 * strength, 0.4 * strength);
  const double c = 1.0 + rng.uniform(-0.4 * strength, 0.4 * strength);
  const double s = 1.0 + rng.uniform(-0.4 * strength, 0.4 * strength);
  const double h = rng.uniform(-0.1 * strength, 0.1 * strength);  // turns

  Image out = img;
  if (strength == 0) return out;

  double mean = 0;
  for (float v : out.px) mean += v;
  mean /= double(out.px.size());

  const double theta = 2.0 * 3.14159265358979323846 * h;
  const double cs = std::cos(theta), sn = std::sin(theta);
  // Luma-preserving hue rotation; exactly the identity at theta = 0.
  const double m[3][3] = {
      {0.213 + cs * 0.787 - sn * 0.213, 0.715 - cs * 0.715 - sn * 0.715,
       0.072 - cs * 0.072 + sn * 0.928},
      {0.213 - cs * 0.213 + sn * 0.143, 0.715 + cs * 0.285 + sn * 0.140,
       0.072 - cs * 0.072 - sn * 0.283},
      {0.213 - cs * 0.213 - sn * 0.787, 0.715 - cs * 0.715 + sn * 0.715,
       0.072 + cs * 0.928 + sn * 0.072}};

  for (std::size_t i = 0; i < out.px.size(); i += 3) {
    double rgb[3];
    for (int ch = 0; ch < 3; ++ch) {
      double v = double(out.px[i + ch]);
      v *= b;
      v = (v - mean) * c + mean;
      rgb[ch] = v;
    }
    const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (int ch = 0; ch < 3; ++ch) rgb[ch] = luma + (rgb[ch] - luma) * s;
    double rot[3];
    for (int ch = 0; ch < 3; ++ch)
      rot[ch] = m[ch][0] * rgb[0] + m[ch][1] * rgb[1] + m[ch][2] * rgb[2];
    for (int ch = 0; ch < 3; ++ch) out.px[i + ch] = clamp01(rot[ch]);
  }
  return out;
}

const char* corruption_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise: return "gaussian-noise";
    case CorruptionKind::blur: return "blur";
    case CorruptionKind::brightness_contrast: return "brightness-contrast";
    case CorruptionKind::snow_dots: return "snow-dots";
  }
  throw std::invalid_argument("corruption_name: unknown kind");
}

CorruptionKind corruption_from_name(const std::string& name) {
  for (CorruptionKind k : kAllCorruptions)
    if (name == corruption_name(k)) return k;
  throw std::invalid_argument("unknown corruption kind: " + name);
}

namespace {

constexpr double kNoiseSigma[5] = {0.02, 0.04, 0.08, 0.12, 0.18};
constexpr int kBlurKernel[5] = {3, 3, 5, 7, 9};
constexpr int kBlurPasses[5] = {1, 2, 1, 1, 1};
constexpr double kShift[5] = {0.1, 0.2, 0.3, 0.4, 0.5};
constexpr double kContrast[5] = {0.9, 0.8, 0.7, 0.6, 0.5};
constexpr int kSnowDots[5] = {10, 25, 50, 100, 200};

int severity_index(int severity) {
  if (severity < 1 || severity > 5)
    throw std::invalid_argument("corruption severity " + std::to_string(severity) +
                                " outside 1..5");
  return severity - 1;
}

void box_blur_pass(Image& img, int k) {
  const int r = k / 2;
  const int w = img.width, h = img.height;
  Image tmp = img;
  // horizontal, replicate edges
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int d = -r; d <= r; ++d)
          acc += img.at(std::clamp(x + d, 0, w - 1), y, c);
        tmp.at(x, y, c) = float(acc / k);
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int d = -r; d <= r; ++d)
          acc += tmp.at(x, std::clamp(y + d, 0, h - 1), c);
        img.at(x, y, c) = clamp01(acc / k);
      }
}

}  // namespace

double corruption_magnitude(CorruptionKind kind, int severity) {
  const int i = severity_index(severity);
  switch (kind) {
    case CorruptionKind::gaussian_noise: return kNoiseSigma[i];
    case CorruptionKind::blur:  // variance of the composed box kernel
      return kBlurPasses[i] * (double(kBlurKernel[i]) * kBlurKernel[i] - 1.0) / 12.0;
    case CorruptionKind::brightness_contrast: return kShift[i];
    case CorruptionKind::snow_dots: return kSnowDots[i];
  }
  throw std::invalid_argument("corruption_magnitude: unknown kind");
}

Image corrupt(const Image& img, const CorruptionSpec& spec) {
  const int i = severity_index(spec.severity);
  Rng rng(mix_seed(spec.seed, 0xc0ffee00ull + std::uint64_t(spec.kind)));
  Image out = img;
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise: {
      const double sigma = kNoiseSigma[i];
      for (auto& v : out.px) v = clamp01(double(v) + sigma * rng.normal());
      break;
    }
    case CorruptionKind::blur: {
      for (int p = 0; p < kBlurPasses[i]; ++p) box_blur_pass(out, kBlurKernel[i]);
      break;
    }
    case CorruptionKind::brightness_contrast: {
      const double shift = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * kShift[i];
      const double c = kContrast[i];
      for (auto& v : out.px) v = clamp01((double(v) - 0.5) * c + 0.5 + shift);
      break;
    }
    case CorruptionKind::snow_dots: {
      for (int d = 0; d < kSnowDots[i]; ++d) {
        const double cx = rng.uniform(0, out.width);
        const double cy = rng.uniform(0, out.height);
        const double r = rng.uniform(1.0, 2.0);
        const int x_lo = std::max(0, int(cx - r - 1)), x_hi = std::min(out.width - 1, int(cx + r + 1));
        const int y_lo = std::max(0, int(cy - r - 1)), y_hi = std::min(out.height - 1, int(cy + r + 1));
        for (int y = y_lo; y <= y_hi; ++y)
          for (int x = x_lo; x <= x_hi; ++x) {
            const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r)
              for (int c = 0; c < 3; ++c) out.at(x, y, c) = 1.0f;
          }
      }
      break;
    }
  }
  return out;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(img.px.size());
  for (float v : img.px)
    bytes.push_back((unsigned char)std::lround(clamp01(v) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_ppm: missing image file " + path);
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: " + path + ": expected P6 header");
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w <= 0 || h <= 0)
    throw std::runtime_error("read_ppm: " + path + ": bad dimensions");
  if (maxval != 255) throw std::runtime_error("read_ppm: " + path + ": maxval must be 255");
  is.get();  // single whitespace after header
  Image img;
  img.width = w;
  img.height = h;
  std::vector<unsigned char> bytes(std::size_t(w) * h * 3);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size())))
    throw std::runtime_error("read_ppm: " + path + ": truncated pixel data");
  img.px.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.px[i] = float(bytes[i]) / 255.0f;
  return img;
}

void write_dataset(const std::vector<Sample>& samples, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  json root;
  root["images"] = json::array();
  root["annotations"] = json::array();
  root["categories"] = json::array();
  for (int c = 0; c < kNumClasses; ++c)
    root["categories"].push_back({{"id", c}, {"name", kClassNames[c]}});

  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    const std::string rel = std::string("images/") + name;
    write_ppm(samples[i].image, (fs::path(dir) / rel).string());
    root["images"].push_back({{"id", int(i)},
                              {"file", rel},
                              {"width", samples[i].image.width},
                              {"height", samples[i].image.height}});
    for (const auto& a : samples[i].annotations)
      root["annotations"].push_back(
          {{"image_id", int(i)},
           {"bbox", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}},
           {"category_id", a.category}});
  }
  std::ofstream os(fs::path(dir) / "annotations.json", std::ios::trunc);
  if (!os) throw std::runtime_error("write_dataset: cannot write annotations.json in " + dir);
  os << root.dump(2) << "\n";
}

namespace {

const json& need(const json& j, const char* field, const std::string& where) {
  auto it = j.find(field);
  if (it == j.end())
    throw std::runtime_error("read_dataset: " + where + ": missing field \"" + field + "\"");
  return *it;
}

}  // namespace

std::vector<Sample> read_dataset(const std::string& dir) {
  const fs::path ann_path = fs::path(dir) / "annotations.json";
  std::ifstream is(ann_path);
  if (!is) throw std::runtime_error("read_dataset: missing " + ann_path.string());
  json root;
  try {
    is >> root;
  } catch (const json::exception& e) {
    throw std::runtime_error("read_dataset: " + ann_path.string() + ": " + e.what());
  }

  const auto& images = need(root, "images", ann_path.string());
  const auto& annotations = need(root, "annotations", ann_path.string());

  std::vector<Sample> samples;
  std::vector<int> id_to_index;
  for (const auto& im : images) {
    const std::string where = ann_path.string() + " images[" + std::to_string(samples.size()) + "]";
    const int id = need(im, "id", where).get<int>();
    const std::string file = need(im, "file", where).get<std::string>();
    const int w = need(im, "width", where).get<int>();
    const int h = need(im, "height", where).get<int>();
    Sample s;
    s.image = read_ppm((fs::path(dir) / file).string());
    if (s.image.width != w || s.image.height != h)
      throw std::runtime_error("read_dataset: " + file + ": size mismatch vs manifest");
    if (id >= int(id_to_index.size())) id_to_index.resize(std::size_t(id) + 1, -1);
    id_to_index[std::size_t(id)] = int(samples.size());
    samples.push_back(std::move(s));
  }
  std::size_t ai = 0;
  for (const auto& an : annotations) {
    const std::string where = ann_path.string() + " annotations[" + std::to_string(ai++) + "]";
    const int image_id = need(an, "image_id", where).get<int>();
    const auto& bbox = need(an, "bbox", where);
    if (!bbox.is_array() || bbox.size() != 4)
      throw std::runtime_error("read_dataset: " + where + ": bbox must be [x1,y1,x2,y2]");
    const int cat = need(an, "category_id", where).get<int>();
    if (image_id < 0 || image_id >= int(id_to_index.size()) ||
        id_to_index[std::size_t(image_id)] < 0)
      throw std::runtime_error("read_dataset: " + where + ": unknown image_id " +
                               std::to_string(image_id));
    Annotation a;
    a.box = {bbox[0].get<double>(), bbox[1].get<double>(), bbox[2].get<double>(),
             bbox[3].get<double>()};
    a.category = cat;
    samples[std::size_t(id_to_index[std::size_t(image_id)])].annotations.push_back(a);
  }
  return samples;
}

}  // namespace mimodet::data
