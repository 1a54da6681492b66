#include "tda/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "tda/binio.hpp"
#include "tda/errors.hpp"
#include "tda/rng.hpp"

namespace tda {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schedule

ScheduleValue noise_schedule(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("timestep must lie in [0, 1], got " + std::to_string(t));
  if (t == 0.0) return {1.0, 0.0};
  if (t == 1.0) return {0.0, 1.0};
  const double angle = 0.5 * std::numbers::pi * t;
  return {std::cos(angle), std::sin(angle)};
}

std::vector<double> v_target(std::span<const double> z0, std::span<const double> eps, double t) {
  if (z0.size() != eps.size()) throw ShapeError("v_target: z0 and eps differ in size");
  const auto [alpha, sigma] = noise_schedule(t);
  std::vector<double> v(z0.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = alpha * eps[i] - sigma * z0[i];
  return v;
}

// ---------------------------------------------------------------------------
// Config and layout

void ModelConfig::validate() const {
  if (latent_dim < 1 || max_frames < 1 || cond_dim < 1 || width < 1 || num_blocks < 1 || num_heads < 1 ||
      cond_tokens < 1 || ff_mult < 1 || time_features < 2) {
    throw ArgumentError("model config: all dimensions must be >= 1");
  }
  if (width % num_heads != 0) throw ArgumentError("model config: width must be divisible by num_heads");
  if (time_features % 2 != 0) throw ArgumentError("model config: time_features must be even");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"latent_dim", c.latent_dim}, {"max_frames", c.max_frames}, {"cond_dim", c.cond_dim},
           {"width", c.width},           {"num_blocks", c.num_blocks}, {"num_heads", c.num_heads},
           {"cond_tokens", c.cond_tokens}, {"ff_mult", c.ff_mult},     {"time_features", c.time_features},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.max_frames = j.value("max_frames", d.max_frames);
  c.cond_dim = j.value("cond_dim", d.cond_dim);
  c.width = j.value("width", d.width);
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.cond_tokens = j.value("cond_tokens", d.cond_tokens);
  c.ff_mult = j.value("ff_mult", d.ff_mult);
  c.time_features = j.value("time_features", d.time_features);
  c.seed = j.value("seed", d.seed);
}

LayerGroup parse_group(std::string_view name) {
  if (name == "to_kv") return LayerGroup::ToKV;
  if (name == "cross") return LayerGroup::Cross;
  if (name == "self") return LayerGroup::Self;
  if (name == "all") return LayerGroup::All;
  throw ArgumentError("unknown layer group '" + std::string(name) + "' (expected to_kv, cross, self or all)");
}

std::string_view group_name(LayerGroup g) {
  switch (g) {
    case LayerGroup::ToKV: return "to_kv";
    case LayerGroup::Cross: return "cross";
    case LayerGroup::Self: return "self";
    case LayerGroup::All: return "all";
  }
  return "?";
}

bool in_group(SectionKind kind, LayerGroup g) {
  switch (g) {
    case LayerGroup::ToKV: return kind == SectionKind::CrossAttentionKV;
    case LayerGroup::Cross:
      return kind == SectionKind::CrossAttentionKV || kind == SectionKind::CrossAttentionOther;
    case LayerGroup::Self: return kind == SectionKind::SelfAttention;
    case LayerGroup::All:
      return kind == SectionKind::Norm || kind == SectionKind::SelfAttention ||
             kind == SectionKind::CrossAttentionOther || kind == SectionKind::CrossAttentionKV ||
             kind == SectionKind::FeedForward;
  }
  return false;
}

std::size_t ParamLayout::add(std::string name, SectionKind kind, std::size_t rows, std::size_t cols) {
  const std::size_t off = total_;
  sections_.push_back({std::move(name), kind, rows, cols, off});
  total_ += rows * cols;
  return off;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.width;
  const std::size_t hidden = cfg.ff_mult * D;
  auto& s = slots_;
  s.in_w = add("in_proj.weight", SectionKind::Embedding, cfg.latent_dim, D);
  s.in_b = add("in_proj.bias", SectionKind::Embedding, 1, D);
  s.pos = add("pos_embed", SectionKind::Embedding, cfg.max_frames, D);
  s.cond_w = add("cond_proj.weight", SectionKind::Embedding, cfg.cond_dim, cfg.cond_tokens * D);
  s.cond_b = add("cond_proj.bias", SectionKind::Embedding, 1, cfg.cond_tokens * D);
  s.time1 = add("time_mlp.0.weight", SectionKind::TimeEmbedding, cfg.time_features, D);
  s.time1_b = add("time_mlp.0.bias", SectionKind::TimeEmbedding, 1, D);
  s.time2 = add("time_mlp.2.weight", SectionKind::TimeEmbedding, D, D);
  s.time2_b = add("time_mlp.2.bias", SectionKind::TimeEmbedding, 1, D);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    BlockSlots bs{};
    bs.norm1 = add(p + "norm1.gain", SectionKind::Norm, 1, D);
    bs.self_q = add(p + "self_attn.to_q.weight", SectionKind::SelfAttention, D, D);
    bs.self_k = add(p + "self_attn.to_k.weight", SectionKind::SelfAttention, D, D);
    bs.self_v = add(p + "self_attn.to_v.weight", SectionKind::SelfAttention, D, D);
    bs.self_out = add(p + "self_attn.to_out.weight", SectionKind::SelfAttention, D, D);
    bs.self_out_b = add(p + "self_attn.to_out.bias", SectionKind::SelfAttention, 1, D);
    bs.norm2 = add(p + "norm2.gain", SectionKind::Norm, 1, D);
    bs.cross_q = add(p + "cross_attn.to_q.weight", SectionKind::CrossAttentionOther, D, D);
    bs.cross_k = add(p + "cross_attn.to_k.weight", SectionKind::CrossAttentionKV, D, D);
    bs.cross_v = add(p + "cross_attn.to_v.weight", SectionKind::CrossAttentionKV, D, D);
    bs.cross_out = add(p + "cross_attn.to_out.weight", SectionKind::CrossAttentionOther, D, D);
    bs.cross_out_b = add(p + "cross_attn.to_out.bias", SectionKind::CrossAttentionOther, 1, D);
    bs.norm3 = add(p + "norm3.gain", SectionKind::Norm, 1, D);
    bs.ff1 = add(p + "ff.0.weight", SectionKind::FeedForward, D, hidden);
    bs.ff1_b = add(p + "ff.0.bias", SectionKind::FeedForward, 1, hidden);
    bs.ff2 = add(p + "ff.2.weight", SectionKind::FeedForward, hidden, D);
    bs.ff2_b = add(p + "ff.2.bias", SectionKind::FeedForward, 1, D);
    s.blocks.push_back(bs);
  }
  s.final_norm = add("final_norm.gain", SectionKind::Output, 1, D);
  s.out_w = add("out_proj.weight", SectionKind::Output, D, cfg.latent_dim);
  s.out_b = add("out_proj.bias", SectionKind::Output, 1, cfg.latent_dim);
}

const Section& ParamLayout::find(std::string_view name) const {
  for (const auto& s : sections_) {
    if (s.name == name) return s;
  }
  throw ArgumentError("no parameter section named '" + std::string(name) + "'");
}

std::size_t ParamLayout::group_size(LayerGroup g) const {
  std::size_t n = 0;
  for (const auto& s : sections_) {
    if (in_group(s.kind, g)) n += s.size();
  }
  return n;
}

std::vector<double> ParamLayout::gather(LayerGroup g, std::span<const double> full) const {
  if (full.size() != total_) throw ShapeError("gather: vector length does not match parameter count");
  std::vector<double> out;
  out.reserve(group_size(g));
  for (const auto& s : sections_) {
    if (!in_group(s.kind, g)) continue;
    out.insert(out.end(), full.begin() + static_cast<std::ptrdiff_t>(s.offset),
               full.begin() + static_cast<std::ptrdiff_t>(s.offset + s.size()));
  }
  return out;
}

void ParamLayout::scatter_add(LayerGroup g, std::span<const double> packed, double scale,
                              std::span<double> full) const {
  if (full.size() != total_) throw ShapeError("scatter_add: vector length does not match parameter count");
  if (packed.size() != group_size(g)) throw ShapeError("scatter_add: packed length does not match group size");
  std::size_t k = 0;
  for (const auto& s : sections_) {
    if (!in_group(s.kind, g)) continue;
    for (std::size_t i = 0; i < s.size(); ++i) full[s.offset + i] += scale * packed[k++];
  }
}

ModelParams::ModelParams(const ModelConfig& cfg) : config(cfg), layout(cfg), values(layout.total(), 0.0) {}

std::span<double> ModelParams::section(std::string_view name) {
  const auto& s = layout.find(name);
  return {values.data() + s.offset, s.size()};
}

std::span<const double> ModelParams::section(std::string_view name) const {
  const auto& s = layout.find(name);
  return {values.data() + s.offset, s.size()};
}

ModelParams init_params(const ModelConfig& cfg) {
  ModelParams p(cfg);
  Rng rng(derive_seed(cfg.seed, {0x1417}));
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.num_blocks));
  for (const auto& s : p.layout.sections()) {
    double* v = p.values.data() + s.offset;
    const bool is_bias = s.name.ends_with(".bias");
    const bool is_gain = s.name.ends_with(".gain");
    if (is_gain) {
      std::fill(v, v + s.size(), 1.0);
      continue;
    }
    if (is_bias) continue;  // zero
    double stddev = 1.0 / std::sqrt(static_cast<double>(s.rows));
    if (s.name == "pos_embed") stddev = 0.2;
    if (s.name == "out_proj.weight") stddev = 0.02;
    if (s.name.ends_with("to_out.weight") || s.name.ends_with("ff.2.weight")) stddev *= residual_scale;
    for (std::size_t i = 0; i < s.size(); ++i) v[i] = stddev * rng.normal();
  }
  return p;
}

Digest content_hash(const ModelParams& params) {
  Sha256 h;
  h.update(std::string_view("UTCK-content-v1"));
  h.update(json(params.config).dump());
  for (const auto& s : params.layout.sections()) {
    h.update(s.name);
    h.update_f64s(std::span<const double>(params.values.data() + s.offset, s.size()));
  }
  return h.finish();
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

constexpr double kNormEps = 1e-6;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// y[n x m] = x[n x k] w[k x m] (+ b)
void linear(const double* x, std::size_t n, std::size_t k, const double* w, const double* b, std::size_t m,
            double* y) {
  const auto N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k), M = static_cast<Eigen::Index>(m);
  MutMap out(y, N, M);
  out.noalias() = ConstMap(x, N, K) * ConstMap(w, K, M);
  if (b != nullptr) out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b, M);
}

void transpose(const double* a, std::size_t rows, std::size_t cols, double* out) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
}

// Accumulating backward of linear(): dx += dy w^T, dw += x^T dy, db += colsum(dy).
void linear_backward(const double* x, std::size_t n, std::size_t k, const double* w, std::size_t m,
                     const double* dy, double* dx, double* dw, double* db) {
  std::vector<double> tmp(std::max(n * k, k * m));
  if (dx != nullptr) {
    std::vector<double> wt(k * m);
    transpose(w, k, m, wt.data());
    linear(dy, n, m, wt.data(), nullptr, k, tmp.data());
    for (std::size_t i = 0; i < n * k; ++i) dx[i] += tmp[i];
  }
  if (dw != nullptr) {
    std::vector<double> xt(n * k);
    transpose(x, n, k, xt.data());
    linear(xt.data(), k, n, dy, nullptr, m, tmp.data());
    for (std::size_t i = 0; i < k * m; ++i) dw[i] += tmp[i];
  }
  if (db != nullptr) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) db[j] += dy[i * m + j];
    }
  }
}

struct NormCache {
  std::vector<double> xhat;
  std::vector<double> inv;
};

void rmsnorm(const double* x, std::size_t n, std::size_t D, const double* gain, double* y, NormCache& c) {
  c.xhat.resize(n * D);
  c.inv.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * D;
    double ss = 0.0;
    for (std::size_t j = 0; j < D; ++j) ss += xi[j] * xi[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(D) + kNormEps);
    c.inv[i] = inv;
    for (std::size_t j = 0; j < D; ++j) {
      c.xhat[i * D + j] = xi[j] * inv;
      y[i * D + j] = c.xhat[i * D + j] * gain[j];
    }
  }
}

void rmsnorm_backward(const NormCache& c, std::size_t n, std::size_t D, const double* gain, const double* dy,
                      double* dx, double* dgain) {
  std::vector<double> a(D);
  for (std::size_t i = 0; i < n; ++i) {
    const double* dyi = dy + i * D;
    const double* xh = c.xhat.data() + i * D;
    double dot = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      dgain[j] += dyi[j] * xh[j];
      a[j] = dyi[j] * gain[j];
      dot += a[j] * xh[j];
    }
    const double mean = dot / static_cast<double>(D);
    for (std::size_t j = 0; j < D; ++j) dx[i * D + j] += c.inv[i] * (a[j] - xh[j] * mean);
  }
}

inline double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }
inline double silu(double a) { return a * sigmoid(a); }
inline double silu_grad(double a) {
  const double s = sigmoid(a);
  return s * (1.0 + a * (1.0 - s));
}

struct AttnWeights {
  const double* q;
  const double* k;
  const double* v;
  const double* out;
  const double* out_b;
};

struct AttnGrads {
  double* q;
  double* k;
  double* v;
  double* out;
  double* out_b;
};

struct AttnCache {
  std::vector<double> q, k, v, p, o;
};

// Copies head h (columns h*dh .. h*dh+dh-1) of a rows x D matrix into rows x dh.
void head_slice(const double* a, std::size_t rows, std::size_t D, std::size_t h, std::size_t dh, double* out) {
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(a + i * D + h * dh, dh, out + i * dh);
}

// Multi-head attention with queries from hq (n x D) over keys/values from hkv (m x D).
void attention(const double* hq, std::size_t n, const double* hkv, std::size_t m, std::size_t D, std::size_t H,
               const AttnWeights& w, AttnCache& c, double* out) {
  const std::size_t dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.q.resize(n * D);
  c.k.resize(m * D);
  c.v.resize(m * D);
  c.p.resize(H * n * m);
  c.o.resize(n * D);
  linear(hq, n, D, w.q, nullptr, D, c.q.data());
  linear(hkv, m, D, w.k, nullptr, D, c.k.data());
  linear(hkv, m, D, w.v, nullptr, D, c.v.data());
  std::vector<double> qh(n * dh), kh(m * dh), kt(dh * m), vh(m * dh), oh(n * dh);
  for (std::size_t h = 0; h < H; ++h) {
    head_slice(c.q.data(), n, D, h, dh, qh.data());
    head_slice(c.k.data(), m, D, h, dh, kh.data());
    head_slice(c.v.data(), m, D, h, dh, vh.data());
    transpose(kh.data(), m, dh, kt.data());
    double* ph = c.p.data() + h * n * m;
    linear(qh.data(), n, dh, kt.data(), nullptr, m, ph);
    for (std::size_t i = 0; i < n; ++i) {
      double* pi = ph + i * m;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        pi[j] *= scale;
        mx = std::max(mx, pi[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        z += pi[j];
      }
      const double invz = 1.0 / z;
      for (std::size_t j = 0; j < m; ++j) pi[j] *= invz;
    }
    linear(ph, n, m, vh.data(), nullptr, dh, oh.data());
    for (std::size_t i = 0; i < n; ++i) std::copy_n(oh.data() + i * dh, dh, c.o.data() + i * D + h * dh);
  }
  linear(c.o.data(), n, D, w.out, w.out_b, D, out);
}

void attention_backward(const double* hq, std::size_t n, const double* hkv, std::size_t m, std::size_t D,
                        std::size_t H, const AttnWeights& w, const AttnCache& c, const double* dout, double* dhq,
                        double* dhkv, const AttnGrads& g) {
  const std::size_t dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> d_o(n * D, 0.0);
  linear_backward(c.o.data(), n, D, w.out, D, dout, d_o.data(), g.out, g.out_b);
  std::vector<double> dq(n * D), dk(m * D), dv(m * D);
  std::vector<double> qh(n * dh), kh(m * dh), vh(m * dh), vt(dh * m), doh(n * dh);
  std::vector<double> dp(n * m), t_nm(n * m), t_dh(std::max(n, m) * dh);
  for (std::size_t h = 0; h < H; ++h) {
    head_slice(c.q.data(), n, D, h, dh, qh.data());
    head_slice(c.k.data(), m, D, h, dh, kh.data());
    head_slice(c.v.data(), m, D, h, dh, vh.data());
    head_slice(d_o.data(), n, D, h, dh, doh.data());
    const double* ph = c.p.data() + h * n * m;

    // dV_h = P^T dO_h
    transpose(ph, n, m, t_nm.data());
    linear(t_nm.data(), m, n, doh.data(), nullptr, dh, t_dh.data());
    for (std::size_t j = 0; j < m; ++j) std::copy_n(t_dh.data() + j * dh, dh, dv.data() + j * D + h * dh);

    // dP = dO_h V_h^T, then softmax backward into dS (scaled)
    transpose(vh.data(), m, dh, vt.data());
    linear(doh.data(), n, dh, vt.data(), nullptr, m, dp.data());
    for (std::size_t i = 0; i < n; ++i) {
      const double* pi = ph + i * m;
      double* dpi = dp.data() + i * m;
      double rowdot = 0.0;
      for (std::size_t j = 0; j < m; ++j) rowdot += pi[j] * dpi[j];
      for (std::size_t j = 0; j < m; ++j) dpi[j] = pi[j] * (dpi[j] - rowdot) * scale;
    }

    // dQ_h = dS K_h ; dK_h = dS^T Q_h
    linear(dp.data(), n, m, kh.data(), nullptr, dh, t_dh.data());
    for (std::size_t i = 0; i < n; ++i) std::copy_n(t_dh.data() + i * dh, dh, dq.data() + i * D + h * dh);
    transpose(dp.data(), n, m, t_nm.data());
    linear(t_nm.data(), m, n, qh.data(), nullptr, dh, t_dh.data());
    for (std::size_t j = 0; j < m; ++j) std::copy_n(t_dh.data() + j * dh, dh, dk.data() + j * D + h * dh);
  }
  linear_backward(hq, n, D, w.q, D, dq.data(), dhq, g.q, nullptr);
  linear_backward(hkv, m, D, w.k, D, dk.data(), dhkv, g.k, nullptr);
  linear_backward(hkv, m, D, w.v, D, dv.data(), dhkv, g.v, nullptr);
}

struct BlockCache {
  NormCache n1, n2, n3;
  std::vector<double> h1, h2, h3;
  AttnCache self_attn, cross_attn;
  std::vector<double> ff_pre, ff_act;
};

struct ForwardCache {
  std::vector<double> feats, time_pre, time_act, temb;
  std::vector<double> ctx;
  std::vector<BlockCache> blocks;
  NormCache final_norm;
  std::vector<double> hf;
};

void time_features(double t, std::size_t F, double* out) {
  for (std::size_t k = 0; k < F / 2; ++k) {
    const double omega = 0.5 * std::numbers::pi * std::ldexp(1.0, static_cast<int>(k));
    out[2 * k] = std::sin(omega * t);
    out[2 * k + 1] = std::cos(omega * t);
  }
}

std::vector<double> forward_impl(const ModelParams& params, std::span<const double> z, double t,
                                 std::span<const double> cond, ForwardCache& c) {
  const auto& cfg = params.config;
  const auto& s = params.layout.slots();
  const double* P = params.values.data();
  const std::size_t L = cfg.max_frames, D = cfg.width, H = cfg.num_heads, d = cfg.latent_dim;
  const std::size_t hidden = cfg.ff_mult * D, Tc = cfg.cond_tokens, F = cfg.time_features;

  c.feats.resize(F);
  time_features(t, F, c.feats.data());
  c.time_pre.resize(D);
  c.time_act.resize(D);
  c.temb.resize(D);
  linear(c.feats.data(), 1, F, P + s.time1, P + s.time1_b, D, c.time_pre.data());
  for (std::size_t j = 0; j < D; ++j) c.time_act[j] = silu(c.time_pre[j]);
  linear(c.time_act.data(), 1, D, P + s.time2, P + s.time2_b, D, c.temb.data());

  c.ctx.resize(Tc * D);
  linear(cond.data(), 1, cfg.cond_dim, P + s.cond_w, P + s.cond_b, Tc * D, c.ctx.data());

  std::vector<double> x(L * D);
  linear(z.data(), L, d, P + s.in_w, P + s.in_b, D, x.data());
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < D; ++j) x[i * D + j] += P[s.pos + i * D + j] + c.temb[j];
  }

  std::vector<double> delta(L * D);
  c.blocks.resize(cfg.num_blocks);
  for (std::size_t b = 0; b < cfg.num_blocks; ++b) {
    const auto& bs = s.blocks[b];
    auto& bc = c.blocks[b];
    bc.h1.resize(L * D);
    rmsnorm(x.data(), L, D, P + bs.norm1, bc.h1.data(), bc.n1);
    attention(bc.h1.data(), L, bc.h1.data(), L, D, H,
              {P + bs.self_q, P + bs.self_k, P + bs.self_v, P + bs.self_out, P + bs.self_out_b}, bc.self_attn,
              delta.data());
    for (std::size_t i = 0; i < L * D; ++i) x[i] += delta[i];

    bc.h2.resize(L * D);
    rmsnorm(x.data(), L, D, P + bs.norm2, bc.h2.data(), bc.n2);
    attention(bc.h2.data(), L, c.ctx.data(), Tc, D, H,
              {P + bs.cross_q, P + bs.cross_k, P + bs.cross_v, P + bs.cross_out, P + bs.cross_out_b},
              bc.cross_attn, delta.data());
    for (std::size_t i = 0; i < L * D; ++i) x[i] += delta[i];

    bc.h3.resize(L * D);
    rmsnorm(x.data(), L, D, P + bs.norm3, bc.h3.data(), bc.n3);
    bc.ff_pre.resize(L * hidden);
    bc.ff_act.resize(L * hidden);
    linear(bc.h3.data(), L, D, P + bs.ff1, P + bs.ff1_b, hidden, bc.ff_pre.data());
    for (std::size_t i = 0; i < L * hidden; ++i) bc.ff_act[i] = silu(bc.ff_pre[i]);
    linear(bc.ff_act.data(), L, hidden, P + bs.ff2, P + bs.ff2_b, D, delta.data());
    for (std::size_t i = 0; i < L * D; ++i) x[i] += delta[i];
  }

  c.hf.resize(L * D);
  rmsnorm(x.data(), L, D, P + s.final_norm, c.hf.data(), c.final_norm);
  std::vector<double> out(L * d);
  linear(c.hf.data(), L, D, P + s.out_w, P + s.out_b, d, out.data());
  return out;
}

// Accumulates d(loss)/d(params) into grad given d(loss)/d(v_hat) = dout.
void backward_impl(const ModelParams& params, std::span<const double> z, std::span<const double> cond,
                   const ForwardCache& c, const double* dout, double* grad) {
  const auto& cfg = params.config;
  const auto& s = params.layout.slots();
  const double* P = params.values.data();
  const std::size_t L = cfg.max_frames, D = cfg.width, H = cfg.num_heads, d = cfg.latent_dim;
  const std::size_t hidden = cfg.ff_mult * D, Tc = cfg.cond_tokens, F = cfg.time_features;

  std::vector<double> dhf(L * D, 0.0);
  linear_backward(c.hf.data(), L, D, P + s.out_w, d, dout, dhf.data(), grad + s.out_w, grad + s.out_b);
  std::vector<double> dx(L * D, 0.0);
  rmsnorm_backward(c.final_norm, L, D, P + s.final_norm, dhf.data(), dx.data(), grad + s.final_norm);

  std::vector<double> dh(L * D), dact(L * hidden), dctx(Tc * D, 0.0);
  for (std::size_t bi = cfg.num_blocks; bi-- > 0;) {
    const auto& bs = s.blocks[bi];
    const auto& bc = c.blocks[bi];

    // feed-forward
    std::fill(dact.begin(), dact.end(), 0.0);
    linear_backward(bc.ff_act.data(), L, hidden, P + bs.ff2, D, dx.data(), dact.data(), grad + bs.ff2,
                    grad + bs.ff2_b);
    for (std::size_t i = 0; i < L * hidden; ++i) dact[i] *= silu_grad(bc.ff_pre[i]);
    std::fill(dh.begin(), dh.end(), 0.0);
    linear_backward(bc.h3.data(), L, D, P + bs.ff1, hidden, dact.data(), dh.data(), grad + bs.ff1,
                    grad + bs.ff1_b);
    rmsnorm_backward(bc.n3, L, D, P + bs.norm3, dh.data(), dx.data(), grad + bs.norm3);

    // cross-attention
    std::fill(dh.begin(), dh.end(), 0.0);
    attention_backward(bc.h2.data(), L, c.ctx.data(), Tc, D, H,
                       {P + bs.cross_q, P + bs.cross_k, P + bs.cross_v, P + bs.cross_out, P + bs.cross_out_b},
                       bc.cross_attn, dx.data(), dh.data(), dctx.data(),
                       {grad + bs.cross_q, grad + bs.cross_k, grad + bs.cross_v, grad + bs.cross_out,
                        grad + bs.cross_out_b});
    rmsnorm_backward(bc.n2, L, D, P + bs.norm2, dh.data(), dx.data(), grad + bs.norm2);

    // self-attention
    std::fill(dh.begin(), dh.end(), 0.0);
    attention_backward(bc.h1.data(), L, bc.h1.data(), L, D, H,
                       {P + bs.self_q, P + bs.self_k, P + bs.self_v, P + bs.self_out, P + bs.self_out_b},
                       bc.self_attn, dx.data(), dh.data(), dh.data(),
                       {grad + bs.self_q, grad + bs.self_k, grad + bs.self_v, grad + bs.self_out,
                        grad + bs.self_out_b});
    rmsnorm_backward(bc.n1, L, D, P + bs.norm1, dh.data(), dx.data(), grad + bs.norm1);
  }

  // input embedding, positions, timestep embedding
  linear_backward(z.data(), L, d, P + s.in_w, D, dx.data(), nullptr, grad + s.in_w, grad + s.in_b);
  std::vector<double> dtemb(D, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < D; ++j) {
      grad[s.pos + i * D + j] += dx[i * D + j];
      dtemb[j] += dx[i * D + j];
    }
  }
  std::vector<double> dact_t(D, 0.0);
  linear_backward(c.time_act.data(), 1, D, P + s.time2, D, dtemb.data(), dact_t.data(), grad + s.time2,
                  grad + s.time2_b);
  for (std::size_t j = 0; j < D; ++j) dact_t[j] *= silu_grad(c.time_pre[j]);
  linear_backward(c.feats.data(), 1, F, P + s.time1, D, dact_t.data(), nullptr, grad + s.time1, grad + s.time1_b);

  linear_backward(cond.data(), 1, cfg.cond_dim, P + s.cond_w, Tc * D, dctx.data(), nullptr, grad + s.cond_w,
                  grad + s.cond_b);
}

void check_inputs(const ModelConfig& cfg, std::span<const double> z, std::span<const double> cond) {
  if (z.size() != cfg.max_frames * cfg.latent_dim) {
    throw ShapeError("latent must have max_frames x latent_dim = " + std::to_string(cfg.max_frames * cfg.latent_dim) +
                     " entries, got " + std::to_string(z.size()));
  }
  if (cond.size() != cfg.cond_dim) {
    throw ShapeError("conditioning vector must have " + std::to_string(cfg.cond_dim) + " entries, got " +
                     std::to_string(cond.size()));
  }
}

void check_track(const ModelConfig& cfg, const LatentTrack& track) {
  if (track.max_frames != cfg.max_frames || track.latent_dim != cfg.latent_dim ||
      track.frames.size() != cfg.max_frames * cfg.latent_dim) {
    throw ShapeError("track " + std::to_string(track.id) + " shape does not match the model config");
  }
  if (track.cond.size() != cfg.cond_dim) {
    throw ShapeError("track " + std::to_string(track.id) + " conditioning length does not match the model config");
  }
  if (track.actual_len < 1 || track.actual_len > cfg.max_frames) {
    throw ArgumentError("track " + std::to_string(track.id) + " has actual_len outside [1, max_frames]");
  }
}

// Loss of one draw; when grad is non-null adds scale * d(loss)/d(params) to it.
double draw_loss(const ModelParams& params, const LatentTrack& track, const NoiseDraw& draw, bool apply_mask,
                 double scale, double* grad) {
  const auto& cfg = params.config;
  const std::size_t n = cfg.max_frames * cfg.latent_dim;
  if (draw.eps.size() != n) throw ShapeError("noise draw shape does not match track frames");
  const auto [alpha, sigma] = noise_schedule(draw.t);
  std::vector<double> z_t(n), target(n);
  for (std::size_t i = 0; i < n; ++i) {
    z_t[i] = alpha * track.frames[i] + sigma * draw.eps[i];
    target[i] = alpha * draw.eps[i] - sigma * track.frames[i];
  }
  ForwardCache cache;
  const auto out = forward_impl(params, z_t, draw.t, track.cond, cache);
  const std::size_t rows = apply_mask ? track.actual_len : cfg.max_frames;
  const std::size_t used = rows * cfg.latent_dim;
  const double denom = static_cast<double>(used);
  double sq = 0.0;
  for (std::size_t i = 0; i < used; ++i) {
    const double e = out[i] - target[i];
    sq += e * e;
  }
  if (grad != nullptr) {
    std::vector<double> dout(n, 0.0);
    const double k = 2.0 * scale / denom;
    for (std::size_t i = 0; i < used; ++i) dout[i] = k * (out[i] - target[i]);
    backward_impl(params, z_t, track.cond, cache, dout.data(), grad);
  }
  return sq / denom;
}

}  // namespace

std::vector<double> forward(const ModelParams& params, std::span<const double> z_t, double t,
                            std::span<const double> cond) {
  check_inputs(params.config, z_t, cond);
  ForwardCache cache;
  return forward_impl(params, z_t, t, cond, cache);
}

std::vector<NoiseDraw> make_draws(std::uint64_t seed, std::size_t count, std::size_t frames, std::size_t dim,
                                  bool stratified) {
  Rng rng(seed);
  std::vector<NoiseDraw> draws(count);
  const double span = 1.0 - 2.0 * kTimestepMargin;
  for (std::size_t k = 0; k < count; ++k) {
    const double u = rng.uniform();
    const double frac = stratified ? (static_cast<double>(k) + u) / static_cast<double>(count) : u;
    draws[k].t = kTimestepMargin + span * frac;
    draws[k].eps.resize(frames * dim);
    for (double& e : draws[k].eps) e = rng.normal();
  }
  return draws;
}

double diffusion_loss(const ModelParams& params, const LatentTrack& track, std::span<const NoiseDraw> draws,
                      bool apply_mask) {
  if (draws.empty()) throw ArgumentError("diffusion_loss: at least one noise draw is required");
  check_track(params.config, track);
  double total = 0.0;
  for (const auto& d : draws) total += draw_loss(params, track, d, apply_mask, 0.0, nullptr);
  return total / static_cast<double>(draws.size());
}

double accumulate_loss_gradient(const ModelParams& params, const LatentTrack& track,
                                std::span<const NoiseDraw> draws, bool apply_mask, double scale,
                                std::span<double> full_grad) {
  check_track(params.config, track);
  if (full_grad.size() != params.layout.total()) throw ShapeError("gradient buffer has the wrong length");
  double total = 0.0;
  for (const auto& d : draws) total += draw_loss(params, track, d, apply_mask, scale, full_grad.data());
  return total;
}

std::vector<double> loss_gradient(const ModelParams& params, const LatentTrack& track,
                                  std::span<const NoiseDraw> draws, bool apply_mask, LayerGroup group) {
  if (draws.empty()) throw ArgumentError("loss_gradient: at least one noise draw is required");
  std::vector<double> full(params.layout.total(), 0.0);
  accumulate_loss_gradient(params, track, draws, apply_mask, 1.0 / static_cast<double>(draws.size()), full);
  return params.layout.gather(group, full);
}

LatentTrack sample(const ModelParams& params, std::span<const double> cond, std::size_t num_steps,
                   std::size_t length, std::uint64_t seed) {
  const auto& cfg = params.config;
  if (num_steps < 1) throw ArgumentError("sample: num_steps must be >= 1");
  if (length < 1 || length > cfg.max_frames) throw ArgumentError("sample: length must lie in [1, max_frames]");
  if (cond.size() != cfg.cond_dim) throw ShapeError("sample: conditioning length does not match the model config");

  const std::size_t n = cfg.max_frames * cfg.latent_dim;
  Rng rng(seed);
  std::vector<double> z(n);
  for (double& v : z) v = rng.normal();

  ForwardCache cache;
  for (std::size_t k = 0; k < num_steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(num_steps);
    const double t_next = k + 1 == num_steps ? 0.0 : 1.0 - static_cast<double>(k + 1) / static_cast<double>(num_steps);
    const auto v = forward_impl(params, z, t, cond, cache);
    const auto [a, s] = noise_schedule(t);
    const auto [an, sn] = noise_schedule(t_next);
    for (std::size_t i = 0; i < n; ++i) {
      const double z0 = a * z[i] - s * v[i];
      const double eps = s * z[i] + a * v[i];
      z[i] = an * z0 + sn * eps;
    }
  }

  LatentTrack out;
  out.max_frames = cfg.max_frames;
  out.latent_dim = cfg.latent_dim;
  out.actual_len = length;
  out.frames = std::move(z);
  std::fill(out.frames.begin() + static_cast<std::ptrdiff_t>(length * cfg.latent_dim), out.frames.end(), 0.0);
  out.cond.assign(cond.begin(), cond.end());
  return out;
}

// ---------------------------------------------------------------------------
// Training

void to_json(json& j, const TrainConfig& c) {
  j = json{{"steps", c.steps},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},
           {"warmup_steps", c.warmup_steps},
           {"min_lr_ratio", c.min_lr_ratio},
           {"grad_clip", c.grad_clip},
           {"loss_threshold", c.loss_threshold},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.min_lr_ratio = j.value("min_lr_ratio", d.min_lr_ratio);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.loss_threshold = j.value("loss_threshold", d.loss_threshold);
  c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const TrainMeta& m) {
  j = json{{"steps", m.steps}, {"initial_loss", m.initial_loss}, {"final_loss", m.final_loss},
           {"converged", m.converged}};
}

void from_json(const json& j, TrainMeta& m) {
  m.steps = j.value("steps", std::size_t{0});
  m.initial_loss = j.value("initial_loss", 0.0);
  m.final_loss = j.value("final_loss", 0.0);
  m.converged = j.value("converged", false);
}

namespace {

constexpr std::size_t kTrainChunk = 4;

std::vector<std::size_t> pick_batch(std::size_t n, std::size_t batch, std::uint64_t seed, std::size_t step) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (batch >= n) return idx;
  Rng rng(derive_seed(seed, {0xba7c, step}));
  for (std::size_t i = 0; i < batch; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(batch);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

Checkpoint train(const std::vector<LatentTrack>& tracks, const ModelConfig& model_cfg, const TrainConfig& cfg,
                 Exec exec) {
  if (tracks.empty()) throw ArgumentError("train: dataset is empty");
  if (cfg.steps < 1 || cfg.batch_size < 1) throw ArgumentError("train: steps and batch_size must be >= 1");
  for (const auto& t : tracks) check_track(model_cfg, t);

  ModelParams params = init_params(model_cfg);
  const std::size_t P = params.layout.total();
  std::vector<double> m(P, 0.0), v(P, 0.0);
  TrainMeta meta;
  double ema = 0.0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = pick_batch(tracks.size(), cfg.batch_size, cfg.seed, step);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    auto acc = chunked_sum(batch.size(), kTrainChunk, P + 1, exec, [&](std::size_t i, std::span<double> buf) {
      const auto& track = tracks[batch[i]];
      const auto draws = make_draws(derive_seed(cfg.seed, {step, track.id}), 1, model_cfg.max_frames,
                                    model_cfg.latent_dim, false);
      buf[P] += inv_b * accumulate_loss_gradient(params, track, draws, false, inv_b, buf.first(P));
    });
    const double loss = acc[P];
    if (!std::isfinite(loss)) throw TrainingError("non-finite loss", static_cast<long>(step));

    if (cfg.grad_clip > 0.0) {
      double norm2 = 0.0;
      for (std::size_t i = 0; i < P; ++i) norm2 += acc[i] * acc[i];
      const double norm = std::sqrt(norm2);
      if (norm > cfg.grad_clip) {
        const double k = cfg.grad_clip / norm;
        for (std::size_t i = 0; i < P; ++i) acc[i] *= k;
      }
    }

    double lr = cfg.learning_rate;
    if (step < cfg.warmup_steps) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    } else if (cfg.steps > cfg.warmup_steps) {
      const double progress =
          static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.steps - cfg.warmup_steps);
      lr *= cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < P; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * acc[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * acc[i] * acc[i];
      params.values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }

    if (step == 0) {
      meta.initial_loss = loss;
      ema = loss;
    } else {
      ema = 0.98 * ema + 0.02 * loss;
    }
  }
  meta.steps = cfg.steps;
  meta.final_loss = ema;
  meta.converged = ema < cfg.loss_threshold;

  Checkpoint ckpt{std::move(params), meta};
  ckpt.provenance["train_config"] = cfg;
  ckpt.rehash();
  return ckpt;
}

double heldout_loss(const ModelParams& params, const std::vector<LatentTrack>& tracks, std::size_t draws_per_track,
                    std::uint64_t seed, Exec exec) {
  if (tracks.empty()) throw ArgumentError("heldout_loss: dataset is empty");
  std::vector<double> losses(tracks.size());
  for_each_index(tracks.size(), exec, [&](std::size_t i) {
    const auto draws = make_draws(derive_seed(seed, {tracks[i].id}), draws_per_track, params.config.max_frames,
                                  params.config.latent_dim);
    losses[i] = diffusion_loss(params, tracks[i], draws, false);
  });
  return tree_sum(losses) / static_cast<double>(tracks.size());
}

// ---------------------------------------------------------------------------
// Checkpoint file

namespace {
constexpr std::string_view kCheckpointMagic = "UTCK";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  json header{{"model_config", ckpt.params.config}, {"metadata", ckpt.meta}, {"provenance", ckpt.provenance}};
  w.str(header.dump());
  const auto& sections = ckpt.params.layout.sections();
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.str(s.name);
    w.u64(s.size());
    w.f64s(std::span<const double>(ckpt.params.values.data() + s.offset, s.size()));
  }
  const Digest h = content_hash(ckpt.params);
  w.bytes(std::string_view(reinterpret_cast<const char*>(h.data()), h.size()));
  return w.release();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  r.expect_magic(kCheckpointMagic);
  const std::size_t version_at = r.offset();
  if (r.u32() != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const std::size_t header_at = r.offset();
  json header;
  try {
    header = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(std::string("invalid checkpoint header JSON: ") + e.what(), header_at);
  }
  ModelConfig cfg;
  try {
    cfg = header.at("model_config").get<ModelConfig>();
    cfg.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what(), header_at);
  }
  Checkpoint ckpt{ModelParams(cfg), header.value("metadata", json::object()).get<TrainMeta>(),
                  header.value("provenance", json::object())};
  const auto& sections = ckpt.params.layout.sections();
  const std::size_t count_at = r.offset();
  if (r.u32() != sections.size()) throw FormatError("section count does not match model config", count_at);
  for (const auto& s : sections) {
    const std::size_t at = r.offset();
    if (r.str() != s.name) throw FormatError("unexpected section name, expected '" + s.name + "'", at);
    const std::size_t n_at = r.offset();
    if (r.u64() != s.size()) throw FormatError("section '" + s.name + "' has the wrong element count", n_at);
    r.f64s(std::span<double>(ckpt.params.values.data() + s.offset, s.size()));
  }
  const std::size_t hash_at = r.offset();
  const std::string stored = r.bytes(32);
  r.expect_end();
  ckpt.rehash();
  if (!std::equal(stored.begin(), stored.end(), ckpt.hash.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw FormatError("content hash mismatch", hash_at);
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) { binio::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace tda
