#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mimodet/aggregate.hpp"
#include "mimodet/autodiff.hpp"
#include "mimodet/checkpoint.hpp"
#include "mimodet/data.hpp"
#include "mimodet/geometry.hpp"
#include "mimodet/rng.hpp"

// MIMO Faster R-CNN: one backbone pass over M stacked input images, an RPN
// whose output convs carry M groups of objectness/delta channels, and an ROI
// head with a shared trunk and M-group classifier/regressor outputs. With
// M = 1 every slice is the whole tensor and the network is a plain
// single-input Faster R-CNN.

namespace mimodet::det {

struct MimoConfig {
  int m = 1;        // ensemble size
  double p = 0.4;   // same-input probability during training; inert when m == 1
  int num_classes = 3;

  std::vector<int> backbone_channels = {16, 32, 64, 64};  // stride 2,2,2,1
  int rpn_channels = 32;
  std::vector<int> roi_fc = {256, 128};
  int roi_size = 4;

  int anchor_stride = 8;
  std::vector<double> anchor_scales = {12, 24, 40};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};
  double pos_iou = 0.5, neg_iou = 0.3;

  int pre_nms_topk = 128;
  int train_topk = 64, test_topk = 32;
  double proposal_nms = 0.7;
  double min_proposal_side = 1.0;  // image pixels
  bool add_gt_proposals = true;

  int rpn_batch = 32;            // N_cls: sampled anchors per channel
  double rpn_pos_fraction = 0.5;
  int roi_batch = 16;            // sampled proposals per channel
  double roi_pos_fraction = 0.25;
  double roi_fg_iou = 0.5;
  double lambda = 1.0;

  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  int image_size = 64;

  int anchors_per_cell() const { return int(anchor_scales.size() * anchor_ratios.size()); }

  void validate() const {
    if (m < 1) throw std::invalid_argument("MimoConfig: m must be >= 1");
    if (p < 0 || p > 1) throw std::invalid_argument("MimoConfig: p outside [0,1]");
    if (num_classes < 1) throw std::invalid_argument("MimoConfig: num_classes < 1");
    if (backbone_channels.size() != 4)
      throw std::invalid_argument("MimoConfig: backbone needs 4 stage widths");
    if (roi_fc.size() != 2) throw std::invalid_argument("MimoConfig: roi_fc needs 2 widths");
    if (pos_iou < neg_iou) throw std::invalid_argument("MimoConfig: pos_iou < neg_iou");
    if (image_size % anchor_stride != 0)
      throw std::invalid_argument("MimoConfig: image size not divisible by anchor stride");
  }
};

template <class T>
struct Model {
  MimoConfig cfg;
  std::vector<std::string> names;
  std::vector<ad::Array<T>> params;
  geom::AnchorGrid anchors;

  // indices into params, by role
  struct Conv {
    int w = -1, b = -1;
    int stride = 1, pad = 1;
  };
  Conv backbone[4];
  Conv rpn_conv, rpn_obj, rpn_delta;
  struct Lin {
    int w = -1, b = -1;
  };
  Lin roi_fc1, roi_fc2, roi_cls, roi_reg;

  ad::Array<T>& p(int idx) { return params[std::size_t(idx)]; }
  const ad::Array<T>& p(int idx) const { return params[std::size_t(idx)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : params) n += a.size();
    return n;
  }
};

namespace detail {

template <class T>
int add_param(Model<T>& model, const std::string& name, ad::Shape shape,
              std::uint64_t seed, int fan_in) {
  Rng rng(mix_seed(seed, std::uint64_t(model.params.size()) + 1));
  std::vector<T> v(ad::shape_numel(shape));
  const double a = fan_in > 0 ? 1.0 / std::sqrt(double(fan_in)) : 0.0;
  for (auto& x : v) x = T(rng.uniform(-a, a));
  model.names.push_back(name);
  model.params.push_back(ad::Array<T>::param(std::move(shape), std::move(v)));
  return int(model.params.size()) - 1;
}

template <class T>
typename Model<T>::Conv add_conv(Model<T>& model, const std::string& name, int out_c,
                                 int in_c, int k, int stride, int pad, std::uint64_t seed) {
  typename Model<T>::Conv c;
  c.w = add_param(model, name + ".w", {out_c, in_c, k, k}, seed, in_c * k * k);
  c.b = add_param(model, name + ".b", {out_c}, seed, 0);  // zero biases
  c.stride = stride;
  c.pad = pad;
  return c;
}

template <class T>
typename Model<T>::Lin add_lin(Model<T>& model, const std::string& name, int in_f,
                               int out_f, std::uint64_t seed) {
  typename Model<T>::Lin l;
  l.w = add_param(model, name + ".w", {in_f, out_f}, seed, in_f);
  l.b = add_param(model, name + ".b", {out_f}, seed, 0);
  return l;
}

}  // namespace detail

template <class T>
Model<T> build_model(const MimoConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> model;
  model.cfg = cfg;
  const auto& bc = cfg.backbone_channels;
  model.backbone[0] = detail::add_conv(model, "backbone.0", bc[0], 3 * cfg.m, 3, 2, 1, seed);
  model.backbone[1] = detail::add_conv(model, "backbone.1", bc[1], bc[0], 3, 2, 1, seed);
  model.backbone[2] = detail::add_conv(model, "backbone.2", bc[2], bc[1], 3, 2, 1, seed);
  model.backbone[3] = detail::add_conv(model, "backbone.3", bc[3], bc[2], 3, 1, 1, seed);

  const int a = cfg.anchors_per_cell();
  model.rpn_conv = detail::add_conv(model, "rpn.conv", cfg.rpn_channels, bc[3], 3, 1, 1, seed);
  model.rpn_obj =
      detail::add_conv(model, "rpn.obj", cfg.m * 2 * a, cfg.rpn_channels, 1, 1, 0, seed);
  model.rpn_delta =
      detail::add_conv(model, "rpn.delta", cfg.m * 4 * a, cfg.rpn_channels, 1, 1, 0, seed);

  const int feat = cfg.image_size / cfg.anchor_stride;
  const int roi_in = bc[3] * cfg.roi_size * cfg.roi_size;
  model.roi_fc1 = detail::add_lin(model, "roi.fc1", roi_in, cfg.roi_fc[0], seed);
  model.roi_fc2 = detail::add_lin(model, "roi.fc2", cfg.roi_fc[0], cfg.roi_fc[1], seed);
  model.roi_cls =
      detail::add_lin(model, "roi.cls", cfg.roi_fc[1], cfg.m * (cfg.num_classes + 1), seed);
  model.roi_reg = detail::add_lin(model, "roi.reg", cfg.roi_fc[1], cfg.m * 4, seed);

  model.anchors = geom::generate_anchors(feat, feat, cfg.anchor_stride, cfg.anchor_scales,
                                         cfg.anchor_ratios);
  return model;
}

// ------------------------------------------------------------- stacking ----

// M images -> one 1 x 3M x H x W input; block m occupies channels [3m, 3m+3).
template <class T>
ad::Array<T> stack_inputs(const std::vector<const data::Image*>& images, int m) {
  if (int(images.size()) != m)
    throw std::invalid_argument("stack_inputs: expected " + std::to_string(m) +
                                " images, got " + std::to_string(images.size()));
  const int h = images[0]->height, w = images[0]->width;
  std::vector<T> v(std::size_t(m) * 3 * h * w);
  for (int mi = 0; mi < m; ++mi) {
    const data::Image& img = *images[std::size_t(mi)];
    if (img.height != h || img.width != w)
      throw std::invalid_argument("stack_inputs: image " + std::to_string(mi) +
                                  " is " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height) + ", expected " +
                                  std::to_string(w) + "x" + std::to_string(h));
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          v[((std::size_t(mi) * 3 + c) * h + y) * w + x] = T(img.at(x, y, c));
  }
  return ad::Array<T>::from_vector({1, 3 * m, h, w}, std::move(v));
}

template <class T>
ad::Array<T> stack_inputs(const std::vector<data::Image>& images, int m) {
  std::vector<const data::Image*> ptrs;
  for (const auto& im : images) ptrs.push_back(&im);
  return stack_inputs<T>(ptrs, m);
}

// Batch of slots, each slot its own M-tuple of images: N x 3M x H x W.
template <class T>
ad::Array<T> stack_batch(const std::vector<std::vector<const data::Image*>>& slots, int m) {
  if (slots.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const int h = slots[0][0]->height, w = slots[0][0]->width;
  std::vector<T> v(slots.size() * std::size_t(m) * 3 * h * w);
  std::size_t off = 0;
  for (const auto& slot : slots) {
    auto one = stack_inputs<T>(slot, m);
    std::copy(one.val().begin(), one.val().end(), v.begin() + std::ptrdiff_t(off));
    off += one.size();
  }
  return ad::Array<T>::from_vector({int(slots.size()), 3 * m, h, w}, std::move(v));
}

// -------------------------------------------------------------- forward ----

template <class T>
struct Forward {
  ad::Array<T> features;   // N x C x h x w (shape independent of M)
  ad::Array<T> rpn_obj;    // N x (M*2A) x h x w
  ad::Array<T> rpn_delta;  // N x (M*4A) x h x w
  int batch = 0;
  int feat_h = 0, feat_w = 0;
};

template <class T>
Forward<T> forward_backbone_rpn(Model<T>& model, const ad::Array<T>& input) {
  const auto& cfg = model.cfg;
  if (input.ndim() != 4 || input.dim(1) != 3 * cfg.m)
    throw std::invalid_argument("forward: input must be Nx" + std::to_string(3 * cfg.m) +
                                "xHxW for M=" + std::to_string(cfg.m) + ", got " +
                                ad::shape_str(input.shape()));
  ad::Array<T> x = input;
  for (const auto& st : model.backbone)
    x = ad::relu(ad::conv2d(x, model.p(st.w), model.p(st.b), st.stride, st.pad));
  Forward<T> f;
  f.features = x;
  auto rpn_hidden = ad::relu(ad::conv2d(x, model.p(model.rpn_conv.w),
                                        model.p(model.rpn_conv.b), 1, 1));
  f.rpn_obj = ad::conv2d(rpn_hidden, model.p(model.rpn_obj.w), model.p(model.rpn_obj.b), 1, 0);
  f.rpn_delta =
      ad::conv2d(rpn_hidden, model.p(model.rpn_delta.w), model.p(model.rpn_delta.b), 1, 0);
  f.batch = input.dim(0);
  f.feat_h = f.features.dim(2);
  f.feat_w = f.features.dim(3);
  return f;
}

// ------------------------------------------------------------ proposals ----

struct Proposal {
  geom::Box box;
  double score = 0;
};

namespace detail {

// Flat index of the objectness logit (which in {0,1}; 1 = object) for
// anchor a of channel m in slot s.
inline std::size_t obj_index(int s, int m, int a, int which, int per_cell, int total_m,
                             int h, int w) {
  const int cell = a / per_cell, k = a % per_cell;
  const int y = cell / w, x = cell % w;
  const int channels = total_m * 2 * per_cell;
  const int c = m * 2 * per_cell + 2 * k + which;
  return ((std::size_t(s) * channels + c) * h + y) * w + x;
}

inline std::size_t delta_index(int s, int m, int a, int coord, int per_cell, int total_m,
                               int h, int w) {
  const int cell = a / per_cell, k = a % per_cell;
  const int y = cell / w, x = cell % w;
  const int channels = total_m * 4 * per_cell;
  const int c = m * 4 * per_cell + 4 * k + coord;
  return ((std::size_t(s) * channels + c) * h + y) * w + x;
}

}  // namespace detail

// Decode channel m's proposals for one slot from raw RPN values: score by
// objectness softmax, apply deltas, clip, drop slivers, greedy NMS, top-k.
// Works on values only; no gradient flows through proposal coordinates.
template <class T>
std::vector<Proposal> decode_proposals(const Model<T>& model, const Forward<T>& f, int slot,
                                       int channel, int topk) {
  const auto& cfg = model.cfg;
  const int a_per = cfg.anchors_per_cell();
  const int na = model.anchors.count();
  const auto& obj = f.rpn_obj.val();
  const auto& del = f.rpn_delta.val();

  std::vector<Proposal> cand;
  cand.reserve(std::size_t(na));
  for (int a = 0; a < na; ++a) {
    const double l0 = double(obj[detail::obj_index(slot, channel, a, 0, a_per, cfg.m,
                                                   f.feat_h, f.feat_w)]);
    const double l1 = double(obj[detail::obj_index(slot, channel, a, 1, a_per, cfg.m,
                                                   f.feat_h, f.feat_w)]);
    const double score = 1.0 / (1.0 + std::exp(l0 - l1));
    geom::BoxDelta d;
    d.tx = double(del[detail::delta_index(slot, channel, a, 0, a_per, cfg.m, f.feat_h, f.feat_w)]);
    d.ty = double(del[detail::delta_index(slot, channel, a, 1, a_per, cfg.m, f.feat_h, f.feat_w)]);
    d.tw = double(del[detail::delta_index(slot, channel, a, 2, a_per, cfg.m, f.feat_h, f.feat_w)]);
    d.th = double(del[detail::delta_index(slot, channel, a, 3, a_per, cfg.m, f.feat_h, f.feat_w)]);
    // keep exp() sane before training settles
    d.tw = std::clamp(d.tw, -8.0, 8.0);
    d.th = std::clamp(d.th, -8.0, 8.0);
    geom::Box box = geom::clip_box(geom::decode_delta(model.anchors.anchors[std::size_t(a)], d),
                                   cfg.image_size, cfg.image_size);
    if (box.width() < cfg.min_proposal_side || box.height() < cfg.min_proposal_side) continue;
    cand.push_back({box, score});
  }

  std::stable_sort(cand.begin(), cand.end(),
                   [](const Proposal& x, const Proposal& y) { return x.score > y.score; });
  if (int(cand.size()) > cfg.pre_nms_topk) cand.resize(std::size_t(cfg.pre_nms_topk));

  std::vector<Proposal> kept;
  std::vector<bool> dead(cand.size(), false);
  for (std::size_t i = 0; i < cand.size() && int(kept.size()) < topk; ++i) {
    if (dead[i]) continue;
    kept.push_back(cand[i]);
    for (std::size_t j = i + 1; j < cand.size(); ++j)
      if (!dead[j] && geom::iou(cand[i].box, cand[j].box) > cfg.proposal_nms) dead[j] = true;
  }
  return kept;
}

// -------------------------------------------------------------- roi head ----

struct RoiRef {
  int slot = 0;
  int channel = 0;
  geom::Box box;  // image coordinates
};

template <class T>
struct RoiBatch {
  std::vector<RoiRef> items;
  ad::Array<T> cls_logits;  // R x M*(K+1)
  ad::Array<T> deltas;      // R x M*4
};

template <class T>
RoiBatch<T> roi_forward(Model<T>& model, const Forward<T>& f, std::vector<RoiRef> items) {
  const auto& cfg = model.cfg;
  if (items.empty()) throw std::invalid_argument("roi_forward: no rois");
  std::vector<ad::RoiCrop> crops;
  crops.reserve(items.size());
  const double s = cfg.anchor_stride;
  for (const auto& it : items)
    crops.push_back({it.slot, {it.box.x1 / s, it.box.y1 / s, it.box.x2 / s, it.box.y2 / s}});
  auto x = ad::crop_resize_multi(f.features, crops, cfg.roi_size, cfg.roi_size);
  x = ad::relu(ad::linear(x, model.p(model.roi_fc1.w), model.p(model.roi_fc1.b)));
  x = ad::relu(ad::linear(x, model.p(model.roi_fc2.w), model.p(model.roi_fc2.b)));
  RoiBatch<T> out;
  out.items = std::move(items);
  out.cls_logits = ad::linear(x, model.p(model.roi_cls.w), model.p(model.roi_cls.b));
  out.deltas = ad::linear(x, model.p(model.roi_reg.w), model.p(model.roi_reg.b));
  return out;
}

// ----------------------------------------------------------------- plans ----

// Everything sampled/matched ahead of the differentiable loss, so the loss
// is a pure function of the parameters given a plan.
struct RpnPlan {
  int slot = 0, channel = 0;
  std::vector<int> anchors;        // sampled anchor indices
  std::vector<int> cls_targets;    // 1 object / 0 background, parallel
  std::vector<int> positives;      // sampled anchor indices with box targets
  std::vector<geom::BoxDelta> reg_targets;  // parallel to positives
};

struct RoiPlan {
  int slot = 0, channel = 0;
  std::vector<geom::Box> rois;
  std::vector<int> cls_targets;    // class id, or num_classes for background
  std::vector<int> fg;             // indices into rois
  std::vector<geom::BoxDelta> reg_targets;  // parallel to fg
};

namespace detail {

// Fisher-Yates prefix shuffle; picks n distinct entries deterministically.
inline void sample_subset(std::vector<int>& pool, std::size_t n, Rng& rng) {
  n = std::min(n, pool.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + std::size_t(rng.uniform_int(0, std::int64_t(pool.size() - i - 1)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
}

}  // namespace detail

inline RpnPlan build_rpn_plan(const geom::AnchorGrid& grid, const std::vector<geom::Box>& gt,
                              int slot, int channel, const MimoConfig& cfg, Rng& rng) {
  RpnPlan plan;
  plan.slot = slot;
  plan.channel = channel;
  const auto match = geom::match_anchors(grid, gt, cfg.pos_iou, cfg.neg_iou);
  std::vector<int> pos, neg;
  for (int a = 0; a < grid.count(); ++a) {
    if (match.labels[std::size_t(a)] == geom::AnchorLabel::positive) pos.push_back(a);
    else if (match.labels[std::size_t(a)] == geom::AnchorLabel::negative) neg.push_back(a);
  }
  const std::size_t want_pos =
      std::min(pos.size(), std::size_t(std::lround(cfg.rpn_batch * cfg.rpn_pos_fraction)));
  detail::sample_subset(pos, want_pos, rng);
  detail::sample_subset(neg, std::size_t(cfg.rpn_batch) - pos.size(), rng);
  for (int a : pos) {
    plan.anchors.push_back(a);
    plan.cls_targets.push_back(1);
    plan.positives.push_back(a);
    plan.reg_targets.push_back(geom::encode_delta(gt[std::size_t(match.gt_index[std::size_t(a)])],
                                                  grid.anchors[std::size_t(a)]));
  }
  for (int a : neg) {
    plan.anchors.push_back(a);
    plan.cls_targets.push_back(0);
  }
  return plan;
}

inline RoiPlan build_roi_plan(const std::vector<Proposal>& proposals,
                              const std::vector<data::Annotation>& gt, int slot, int channel,
                              const MimoConfig& cfg, Rng& rng) {
  RoiPlan plan;
  plan.slot = slot;
  plan.channel = channel;

  std::vector<geom::Box> cand;
  for (const auto& p : proposals) cand.push_back(p.box);
  if (cfg.add_gt_proposals)
    for (const auto& a : gt) cand.push_back(a.box);

  std::vector<int> fg_pool, bg_pool, best_gt(cand.size(), -1);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    double best = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = geom::iou(cand[i], gt[g].box);
      if (v > best) {
        best = v;
        best_gt[i] = int(g);
      }
    }
    if (best >= cfg.roi_fg_iou) fg_pool.push_back(int(i));
    else bg_pool.push_back(int(i));
  }
  const std::size_t want_fg =
      std::min(fg_pool.size(), std::size_t(std::lround(cfg.roi_batch * cfg.roi_pos_fraction)));
  detail::sample_subset(fg_pool, want_fg, rng);
  detail::sample_subset(bg_pool, std::size_t(cfg.roi_batch) - fg_pool.size(), rng);

  for (int i : fg_pool) {
    const auto& g = gt[std::size_t(best_gt[std::size_t(i)])];
    plan.fg.push_back(int(plan.rois.size()));
    plan.rois.push_back(cand[std::size_t(i)]);
    plan.cls_targets.push_back(g.category);
    plan.reg_targets.push_back(geom::encode_delta(g.box, cand[std::size_t(i)]));
  }
  for (int i : bg_pool) {
    plan.rois.push_back(cand[std::size_t(i)]);
    plan.cls_targets.push_back(cfg.num_classes);
  }
  return plan;
}

// ---------------------------------------------------------------- losses ----

template <class T>
struct LossParts {
  ad::Array<T> total;  // scalar on the tape
  double rpn_cls = 0, rpn_reg = 0, roi_cls = 0, roi_reg = 0;
};

// Eq.-style per-channel RPN term: mean 2-way cross entropy over the sampled
// anchors plus lambda/N_box * smooth-L1 over the positive ones; summed over
// the supplied plans.
template <class T>
LossParts<T> rpn_loss(const Model<T>& model, const Forward<T>& f,
                      const std::vector<RpnPlan>& plans) {
  const auto& cfg = model.cfg;
  const int a_per = cfg.anchors_per_cell();
  std::vector<ad::Array<T>> terms;
  LossParts<T> parts;
  for (const auto& plan : plans) {
    if (!plan.anchors.empty()) {
      std::vector<std::size_t> idx;
      idx.reserve(plan.anchors.size() * 2);
      for (int a : plan.anchors)
        for (int which = 0; which < 2; ++which)
          idx.push_back(detail::obj_index(plan.slot, plan.channel, a, which, a_per, cfg.m,
                                          f.feat_h, f.feat_w));
      auto logits = ad::gather(f.rpn_obj, std::move(idx), {int(plan.anchors.size()), 2});
      auto cls = ad::softmax_cross_entropy(logits, plan.cls_targets);
      parts.rpn_cls += double(cls.item());
      terms.push_back(cls);
    }
    if (!plan.positives.empty()) {
      std::vector<std::size_t> idx;
      std::vector<T> tgt;
      for (std::size_t i = 0; i < plan.positives.size(); ++i) {
        const int a = plan.positives[i];
        for (int coord = 0; coord < 4; ++coord)
          idx.push_back(detail::delta_index(plan.slot, plan.channel, a, coord, a_per, cfg.m,
                                            f.feat_h, f.feat_w));
        const auto& d = plan.reg_targets[i];
        tgt.insert(tgt.end(), {T(d.tx), T(d.ty), T(d.tw), T(d.th)});
      }
      const int npos = int(plan.positives.size());
      auto pred = ad::gather(f.rpn_delta, std::move(idx), {npos, 4});
      auto target = ad::Array<T>::from_vector({npos, 4}, std::move(tgt));
      auto reg = ad::scale(ad::smooth_l1(pred, target), T(cfg.lambda / std::max(1, npos)));
      parts.rpn_reg += double(reg.item());
      terms.push_back(reg);
    }
  }
  parts.total = terms.empty() ? ad::Array<T>::zeros({1}) : ad::add_n(terms);
  return parts;
}

// ROI analog: (K+1)-way cross entropy over sampled proposals plus
// lambda/N_fg * smooth-L1 on foreground deltas, per channel, summed.
template <class T>
LossParts<T> roi_loss(const Model<T>& model, const RoiBatch<T>& batch,
                      const std::vector<RoiPlan>& plans) {
  const auto& cfg = model.cfg;
  const int kplus = cfg.num_classes + 1;
  const int cls_width = cfg.m * kplus;
  const int reg_width = cfg.m * 4;

  // map each plan's rois to row ranges of the batch (rows were appended in
  // plan order by assemble_roi_items)
  std::vector<ad::Array<T>> terms;
  LossParts<T> parts;
  std::size_t row = 0;
  for (const auto& plan : plans) {
    const std::size_t n = plan.rois.size();
    if (n == 0) continue;
    std::vector<std::size_t> idx;
    idx.reserve(n * std::size_t(kplus));
    for (std::size_t r = 0; r < n; ++r)
      for (int j = 0; j < kplus; ++j)
        idx.push_back((row + r) * std::size_t(cls_width) +
                      std::size_t(plan.channel) * kplus + std::size_t(j));
    auto logits = ad::gather(batch.cls_logits, std::move(idx), {int(n), kplus});
    auto cls = ad::softmax_cross_entropy(logits, plan.cls_targets);
    parts.roi_cls += double(cls.item());
    terms.push_back(cls);

    if (!plan.fg.empty()) {
      std::vector<std::size_t> ridx;
      std::vector<T> tgt;
      for (std::size_t i = 0; i < plan.fg.size(); ++i) {
        const std::size_t r = row + std::size_t(plan.fg[i]);
        for (int coord = 0; coord < 4; ++coord)
          ridx.push_back(r * std::size_t(reg_width) + std::size_t(plan.channel) * 4 +
                         std::size_t(coord));
        const auto& d = plan.reg_targets[i];
        tgt.insert(tgt.end(), {T(d.tx), T(d.ty), T(d.tw), T(d.th)});
      }
      const int nfg = int(plan.fg.size());
      auto pred = ad::gather(batch.deltas, std::move(ridx), {nfg, 4});
      auto target = ad::Array<T>::from_vector({nfg, 4}, std::move(tgt));
      auto reg = ad::scale(ad::smooth_l1(pred, target), T(cfg.lambda / std::max(1, nfg)));
      parts.roi_reg += double(reg.item());
      terms.push_back(reg);
    }
    row += n;
  }
  parts.total = terms.empty() ? ad::Array<T>::zeros({1}) : ad::add_n(terms);
  return parts;
}

// Rois of all plans flattened in plan order, for one roi_forward call.
inline std::vector<RoiRef> assemble_roi_items(const std::vector<RoiPlan>& plans) {
  std::vector<RoiRef> items;
  for (const auto& plan : plans)
    for (const auto& b : plan.rois) items.push_back({plan.slot, plan.channel, b});
  return items;
}

// Forward + per-channel plan building + both losses for one batch; the
// returned scalar is the per-slot channel-sum averaged over slots. Sampling
// is deterministic in sampling_seed.
template <class T>
struct BatchLoss {
  ad::Array<T> total;
  double value = 0;
  double rpn_cls = 0, rpn_reg = 0, roi_cls = 0, roi_reg = 0;
};

template <class T>
BatchLoss<T> detector_loss(Model<T>& model, const ad::Array<T>& input,
                           const std::vector<std::vector<const std::vector<data::Annotation>*>>& gt,
                           std::uint64_t sampling_seed) {
  const auto& cfg = model.cfg;
  const int slots = input.dim(0);
  if (int(gt.size()) != slots)
    throw std::invalid_argument("detector_loss: " + std::to_string(gt.size()) +
                                " gt slots for batch of " + std::to_string(slots));
  auto f = forward_backbone_rpn(model, input);

  std::vector<RpnPlan> rpn_plans;
  std::vector<RoiPlan> roi_plans;
  for (int s = 0; s < slots; ++s) {
    if (int(gt[std::size_t(s)].size()) != cfg.m)
      throw std::invalid_argument("detector_loss: slot " + std::to_string(s) + " carries " +
                                  std::to_string(gt[std::size_t(s)].size()) +
                                  " channels, expected " + std::to_string(cfg.m));
    for (int m = 0; m < cfg.m; ++m) {
      const auto& anns = *gt[std::size_t(s)][std::size_t(m)];
      std::vector<geom::Box> boxes;
      for (const auto& a : anns) boxes.push_back(a.box);
      Rng rng(mix_seed(sampling_seed, std::uint64_t(s) * 0x10001 + std::uint64_t(m)));
      rpn_plans.push_back(build_rpn_plan(model.anchors, boxes, s, m, cfg, rng));
      auto proposals = decode_proposals(model, f, s, m, cfg.train_topk);
      roi_plans.push_back(build_roi_plan(proposals, anns, s, m, cfg, rng));
    }
  }

  auto rpn = rpn_loss(model, f, rpn_plans);
  LossParts<T> roi;
  auto items = assemble_roi_items(roi_plans);
  if (!items.empty()) {
    auto batch = roi_forward(model, f, std::move(items));
    roi = roi_loss(model, batch, roi_plans);
  } else {
    roi.total = ad::Array<T>::zeros({1});
  }

  BatchLoss<T> out;
  const T inv = T(1.0 / slots);
  out.total = ad::scale(ad::add(rpn.total, roi.total), inv);
  out.value = double(out.total.item());
  out.rpn_cls = rpn.rpn_cls / slots;
  out.rpn_reg = rpn.rpn_reg / slots;
  out.roi_cls = roi.roi_cls / slots;
  out.roi_reg = roi.roi_reg / slots;
  return out;
}

// ------------------------------------------------------------- predict ----

namespace detail {

template <class T>
std::vector<agg::Detection> decode_channel_detections(const Model<T>& model,
                                                      const RoiBatch<T>& batch, int channel,
                                                      std::size_t row_begin, std::size_t count) {
  const auto& cfg = model.cfg;
  const int kplus = cfg.num_classes + 1;
  const int cls_width = cfg.m * kplus;
  const int reg_width = cfg.m * 4;
  std::vector<agg::Detection> dets;
  for (std::size_t r = row_begin; r < row_begin + count; ++r) {
    const T* lrow = batch.cls_logits.val().data() + r * std::size_t(cls_width) +
                    std::size_t(channel) * kplus;
    double mx = double(lrow[0]);
    for (int j = 1; j < kplus; ++j) mx = std::max(mx, double(lrow[j]));
    double denom = 0;
    for (int j = 0; j < kplus; ++j) denom += std::exp(double(lrow[j]) - mx);
    int best_cls = -1;
    double best_p = 0;
    for (int j = 0; j < cfg.num_classes; ++j) {  // foreground classes only
      const double p = std::exp(double(lrow[j]) - mx) / denom;
      if (p > best_p) {
        best_p = p;
        best_cls = j;
      }
    }
    if (best_cls < 0 || best_p < cfg.score_threshold) continue;

    const T* drow = batch.deltas.val().data() + r * std::size_t(reg_width) +
                    std::size_t(channel) * 4;
    geom::BoxDelta d{double(drow[0]), double(drow[1]),
                     std::clamp(double(drow[2]), -8.0, 8.0),
                     std::clamp(double(drow[3]), -8.0, 8.0)};
    geom::Box box = geom::clip_box(geom::decode_delta(batch.items[r].box, d), cfg.image_size,
                                   cfg.image_size);
    if (box.width() <= 1e-6 || box.height() <= 1e-6) continue;
    dets.push_back({box, best_cls, best_p, channel});
  }
  return agg::nms(dets, cfg.nms_threshold);
}

}  // namespace detail

// Test-time pass: the image is repeated M times; each channel's proposals
// run through the ROI head, score-thresholded and per-class NMS'd. Channel
// outputs come back separately for the aggregation stage.
template <class T>
std::vector<std::vector<agg::Detection>> predict(Model<T>& model, const data::Image& image) {
  const auto& cfg = model.cfg;
  std::vector<const data::Image*> copies(std::size_t(cfg.m), &image);
  auto input = stack_inputs<T>(copies, cfg.m);
  auto f = forward_backbone_rpn(model, input);

  std::vector<std::vector<Proposal>> proposals(std::size_t(cfg.m));
  std::vector<RoiRef> items;
  for (int m = 0; m < cfg.m; ++m) {
    proposals[std::size_t(m)] = decode_proposals(model, f, 0, m, cfg.test_topk);
    for (const auto& p : proposals[std::size_t(m)]) items.push_back({0, m, p.box});
  }

  std::vector<std::vector<agg::Detection>> out(std::size_t(cfg.m));
  if (items.empty()) return out;
  auto batch = roi_forward(model, f, std::move(items));
  std::size_t row = 0;
  for (int m = 0; m < cfg.m; ++m) {
    const std::size_t count = proposals[std::size_t(m)].size();
    out[std::size_t(m)] = detail::decode_channel_detections(model, batch, m, row, count);
    row += count;
  }
  return out;
}

template <class T>
std::vector<agg::Detection> predict_single_channel(Model<T>& model, const data::Image& image,
                                                   int channel) {
  if (channel < 0 || channel >= model.cfg.m)
    throw std::invalid_argument("predict_single_channel: channel " + std::to_string(channel) +
                                " outside M=" + std::to_string(model.cfg.m));
  return predict(model, image)[std::size_t(channel)];
}

// ---------------------------------------------------------- checkpoints ----

template <class T>
std::vector<ckpt::Entry> to_entries(const Model<T>& model) {
  std::vector<ckpt::Entry> entries;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    ckpt::Entry e;
    e.name = model.names[i];
    e.shape = model.params[i].shape();
    e.dtype = sizeof(T) == 4 ? 'f' : 'd';
    e.values.assign(model.params[i].val().begin(), model.params[i].val().end());
    entries.push_back(std::move(e));
  }
  return entries;
}

template <class T>
void load_entries(Model<T>& model, const std::vector<ckpt::Entry>& entries) {
  if (entries.size() != model.params.size())
    throw std::runtime_error("checkpoint: expected " + std::to_string(model.params.size()) +
                             " parameters, file has " + std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name != model.names[i])
      throw std::runtime_error("checkpoint: parameter " + std::to_string(i) + " is \"" +
                               entries[i].name + "\", model expects \"" + model.names[i] + "\"");
    if (entries[i].shape != model.params[i].shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + entries[i].name);
    auto& dst = model.params[i].val();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = T(entries[i].values[j]);
  }
}

template <class T>
void save_model(const Model<T>& model, const std::string& path) {
  ckpt::save(path, to_entries(model));
}

template <class T>
void load_model(Model<T>& model, const std::string& path) {
  load_entries(model, ckpt::load(path));
}

}  // namespace mimodet::det
