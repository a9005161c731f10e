#include "xecg/encoder.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace xecg {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMinNorm = std::numeric_limits<double>::min();

std::string bname(std::size_t k, const char* leaf) { return "block" + std::to_string(k) + "." + leaf; }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor normal_tensor(Shape s, double sd, Rng& rng) {
  Tensor t(std::move(s));
  for (auto& v : t.values()) v = rng.normal(0.0, sd);
  return t;
}

void check_finite(const double* v, std::size_t n, std::size_t block, char kind, std::size_t step) {
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(v[i]))
      throw NumericError(std::string(kind == 's' ? "sLSTM" : "mLSTM") + " block " + std::to_string(block) +
                         ": non-finite hidden state at step " + std::to_string(step));
}

}  // namespace

const char* to_string(PoolMode m) {
  switch (m) {
    case PoolMode::kAvg: return "avg";
    case PoolMode::kMax: return "max";
    case PoolMode::kAttn: return "attn";
  }
  return "?";
}

PoolMode pool_mode_from_string(const std::string& s) {
  if (s == "avg") return PoolMode::kAvg;
  if (s == "max") return PoolMode::kMax;
  if (s == "attn") return PoolMode::kAttn;
  throw ConfigError("unknown pool mode '" + s + "' (expected avg, max or attn)");
}

void EncoderConfig::validate() const {
  if (embed_dim == 0) throw ConfigError("encoder.embed_dim must be positive");
  if (n_heads == 0 || embed_dim % n_heads != 0) throw ConfigError("encoder.embed_dim must be divisible by n_heads");
  if (block_pattern.empty()) throw ConfigError("encoder.block_pattern must be non-empty");
  for (char c : block_pattern)
    if (c != 's' && c != 'm') throw ConfigError("encoder.block_pattern may only contain 's' and 'm'");
  if (patch_size == 0) throw ConfigError("encoder.patch_size must be positive");
  if (in_channels != 1 && in_channels != kLeadSlots) throw ConfigError("encoder.in_channels must be 1 or 12");
  if (!(model_rate_hz > 0)) throw ConfigError("encoder.model_rate_hz must be positive");
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"block_pattern", c.block_pattern},
          {"patch_size", c.patch_size},
          {"in_channels", c.in_channels},
          {"n_heads", c.n_heads},
          {"model_rate_hz", c.model_rate_hz},
          {"bidir", c.bidir == BidirMode::kAlternate ? "alternate" : "paired_sum"}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.block_pattern = j.value("block_pattern", c.block_pattern);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.model_rate_hz = j.value("model_rate_hz", c.model_rate_hz);
  const std::string bidir = j.value("bidir", std::string("alternate"));
  if (bidir == "alternate") c.bidir = BidirMode::kAlternate;
  else if (bidir == "paired_sum") c.bidir = BidirMode::kPairedSum;
  else throw ConfigError("encoder.bidir must be 'alternate' or 'paired_sum'");
  c.validate();
  return c;
}

// ---- ParamSet ----------------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ContractError("duplicate parameter " + name);
  index_[name] = values_.size();
  names_.push_back(name);
  values_.push_back(std::move(value));
  return values_.back();
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw CheckpointError("missing parameter " + name);
  return values_[it->second];
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw CheckpointError("missing parameter " + name);
  return values_[it->second];
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

bool ParamSet::all_finite() const {
  for (const auto& v : values_)
    if (!v.all_finite()) return false;
  return true;
}

void ParamSet::require_same_layout(const ParamSet& other) const {
  if (other.size() != size()) throw CheckpointError("parameter sets differ in size");
  for (std::size_t i = 0; i < size(); ++i)
    if (names_[i] != other.names_[i] || values_[i].shape() != other.values_[i].shape())
      throw CheckpointError("parameter layout mismatch at " + names_[i]);
}

ParamSet init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t E = cfg.embed_dim, H = cfg.n_heads, d = cfg.head_dim();
  const double sd = 1.0 / std::sqrt(static_cast<double>(E));
  ParamSet p;
  p.add("embed.W", normal_tensor({cfg.patch_width(), E}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_width())), rng));
  p.add("embed.b", Tensor({E}, 0.0));
  for (std::size_t k = 0; k < cfg.n_blocks(); ++k) {
    p.add(bname(k, "ln_g"), Tensor({E}, 1.0));
    p.add(bname(k, "ln_b"), Tensor({E}, 0.0));
    if (cfg.block_pattern[k] == 's') {
      p.add(bname(k, "W_in"), normal_tensor({E, 4 * E}, sd, rng));
      Tensor b({4 * E}, 0.0);
      for (std::size_t j = 0; j < E; ++j) b[2 * E + j] = -0.1;  // mild forgetting at init
      p.add(bname(k, "b_in"), std::move(b));
      p.add(bname(k, "R"), normal_tensor({E, 4 * E}, sd, rng));
    } else {
      p.add(bname(k, "W_in"), normal_tensor({E, 4 * E + 2 * H}, sd, rng));
      Tensor b({4 * E + 2 * H}, 0.0);
      for (std::size_t j = 0; j < H; ++j) b[4 * E + H + j] = -0.1;
      p.add(bname(k, "b_in"), std::move(b));
    }
    p.add(bname(k, "W_out"), normal_tensor({E, E}, sd, rng));
    p.add(bname(k, "b_out"), Tensor({E}, 0.0));
  }
  p.add("pool.query", normal_tensor({H, d}, 0.02, rng));
  return p;
}

std::size_t param_layer(const std::string& name, std::size_t n_blocks) {
  if (name.rfind("embed.", 0) == 0 || name == "mask_token") return 0;
  if (name.rfind("block", 0) == 0) {
    const auto dot = name.find('.');
    return static_cast<std::size_t>(std::stoul(name.substr(5, dot - 5))) + 1;
  }
  return n_blocks + 1;
}

BoundParams::BoundParams(Tape& tape, const ParamSet& params, bool requires_grad) : params_(&params) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars_.push_back(tape.leaf(params.value(i), requires_grad));
}

BoundParams::BoundParams(const ParamSet& layout, std::vector<Var> vars) : params_(&layout), vars_(std::move(vars)) {
  if (vars_.size() != layout.size()) throw ContractError("BoundParams: one variable per parameter required");
}

Var BoundParams::operator[](const std::string& name) const {
  for (std::size_t i = 0; i < params_->size(); ++i)
    if (params_->name(i) == name) return vars_[i];
  throw CheckpointError("missing parameter " + name);
}

Tensor stack_time_major(std::span<const Tensor> per_sample) {
  if (per_sample.empty()) throw ContractError("stack_time_major: empty batch");
  const std::size_t n = per_sample[0].dim(0), w = per_sample[0].dim(1), b = per_sample.size();
  for (const auto& t : per_sample)
    if (t.rank() != 2 || t.dim(0) != n || t.dim(1) != w)
      throw ShapeError("stack_time_major: samples must share shape " + shape_str(per_sample[0].shape()));
  Tensor out({n * b, w});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < n; ++t) std::copy_n(per_sample[i].data() + t * w, w, out.data() + (t * b + i) * w);
  return out;
}

Tensor unstack_sample(const Tensor& tm, std::size_t batch, std::size_t b) {
  const std::size_t w = tm.dim(1), n = tm.dim(0) / batch;
  Tensor out({n, w});
  for (std::size_t t = 0; t < n; ++t) std::copy_n(tm.data() + (t * batch + b) * w, w, out.data() + t * w);
  return out;
}

// ---- differentiable path -----------------------------------------------------------

Var embed(const EncoderConfig& cfg, const BoundParams& p, Var patches) {
  if (patches.shape().size() != 2 || patches.dim(1) != cfg.patch_width())
    throw ConfigError("embed: patches of width " + std::to_string(patches.shape().back()) + " but the encoder expects " +
                      std::to_string(cfg.patch_width()));
  return ops::add(ops::matmul(patches, p["embed.W"]), p["embed.b"]);
}

namespace {

// Scans run forward in time; callers reverse the sequence for the other
// direction. States start at zero (m_0 = 0). Since |c_t| <= n_t, the sLSTM
// normalizer is floored at the smallest normal double: when the input gate
// underflows both are zero and the readout is 0 rather than 0/0.
Var slstm_scan(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var xn, SeqBatch sb) {
  Tape& tape = *xn.tape();
  const std::size_t E = cfg.embed_dim, B = sb.batch, N = sb.length;
  const Var pre = ops::add(ops::matmul(xn, p[bname(k, "W_in")]), p[bname(k, "b_in")]);
  const Var R = p[bname(k, "R")];
  Var h = tape.constant(Tensor({B, E})), c = h, n = h, m = h;
  std::vector<Var> hs(N);
  for (std::size_t t = 0; t < N; ++t) {
    const Var g = t == 0 ? ops::slice(pre, 0, 0, B) : ops::add(ops::slice(pre, 0, t * B, B), ops::matmul(h, R));
    const Var z = ops::tanh(ops::slice(g, 1, 0, E));
    const Var it = ops::slice(g, 1, E, E);
    const Var ft = ops::slice(g, 1, 2 * E, E);
    const Var o = ops::sigmoid(ops::slice(g, 1, 3 * E, E));
    const Var fm = ops::add(ft, m);
    const Var mn = ops::maximum(fm, it);
    const Var ip = ops::exp(ops::sub(it, mn));
    const Var fp = ops::exp(ops::sub(fm, mn));
    c = ops::add(ops::mul(fp, c), ops::mul(ip, z));
    n = ops::add(ops::mul(fp, n), ip);
    m = mn;
    h = ops::mul(o, ops::div(c, ops::maximum(n, kMinNorm)));
    check_finite(h.value().data(), h.value().size(), k, 's', t);
    hs[t] = h;
  }
  return ops::concat(hs, 0);
}

Var mlstm_scan(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var xn, SeqBatch sb) {
  Tape& tape = *xn.tape();
  const std::size_t E = cfg.embed_dim, H = cfg.n_heads, d = cfg.head_dim(), B = sb.batch, N = sb.length;
  const std::size_t BH = B * H;
  const Var pre = ops::add(ops::matmul(xn, p[bname(k, "W_in")]), p[bname(k, "b_in")]);
  const Var q_all = ops::slice(pre, 1, 0, E);
  const Var k_all = ops::slice(pre, 1, E, E);
  const Var v_all = ops::slice(pre, 1, 2 * E, E);
  const Var o_all = ops::sigmoid(ops::slice(pre, 1, 3 * E, E));
  const Var i_all = ops::slice(pre, 1, 4 * E, H);
  const Var f_all = ops::slice(pre, 1, 4 * E + H, H);
  const Var one = tape.constant(Tensor::scalar(1.0));
  Var C = tape.constant(Tensor({BH, d, d})), n = tape.constant(Tensor({BH, d})), m = tape.constant(Tensor({BH}));
  std::vector<Var> hs(N);
  for (std::size_t t = 0; t < N; ++t) {
    const Var q = ops::reshape(ops::slice(q_all, 0, t * B, B), {BH, d});
    const Var kk = ops::reshape(ops::slice(k_all, 0, t * B, B), {BH, d});
    const Var v = ops::reshape(ops::slice(v_all, 0, t * B, B), {BH, d});
    const Var o = ops::slice(o_all, 0, t * B, B);
    const Var it = ops::reshape(ops::slice(i_all, 0, t * B, B), {BH});
    const Var ft = ops::reshape(ops::slice(f_all, 0, t * B, B), {BH});
    const Var outer = ops::bmm(ops::reshape(v, {BH, d, 1}), ops::reshape(kk, {BH, 1, d}));
    const Var fm = ops::add(ft, m);
    const Var mn = ops::maximum(fm, it);
    const Var ip = ops::exp(ops::sub(it, mn));
    const Var fp = ops::exp(ops::sub(fm, mn));
    C = ops::add(ops::scale_rows(C, fp), ops::scale_rows(outer, ip));
    n = ops::add(ops::scale_rows(n, fp), ops::scale_rows(kk, ip));
    m = mn;
    const Var num = ops::reshape(ops::bmm(C, ops::reshape(q, {BH, d, 1})), {BH, d});
    const Var den = ops::maximum(ops::abs(ops::sum(ops::mul(n, q), 1)), 1.0);
    const Var hh = ops::scale_rows(num, ops::div(one, den));
    const Var h = ops::mul(o, ops::reshape(hh, {B, E}));
    check_finite(h.value().data(), h.value().size(), k, 'm', t);
    hs[t] = h;
  }
  return ops::concat(hs, 0);
}

Var reverse_time(Var x, SeqBatch sb) {
  const std::size_t w = x.dim(1);
  return ops::reshape(ops::reverse(ops::reshape(x, {sb.length, sb.batch * w}), 0), {sb.length * sb.batch, w});
}

Var block_forward_dir(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var x, SeqBatch sb) {
  const Var xn = ops::layer_norm(x, p[bname(k, "ln_g")], p[bname(k, "ln_b")], kLnEps);
  Var h = cell_scan(cfg, p, k, xn, sb, false);
  if (cfg.bidir == BidirMode::kPairedSum) h = ops::add(h, cell_scan(cfg, p, k, xn, sb, true));
  return ops::add(x, ops::add(ops::matmul(h, p[bname(k, "W_out")]), p[bname(k, "b_out")]));
}

}  // namespace

Var cell_scan(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var xn, SeqBatch sb, bool reverse) {
  auto scan = [&](Var in) {
    return cfg.block_pattern.at(k) == 's' ? slstm_scan(cfg, p, k, in, sb) : mlstm_scan(cfg, p, k, in, sb);
  };
  return reverse ? reverse_time(scan(reverse_time(xn, sb)), sb) : scan(xn);
}

Var block_forward(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var x, SeqBatch sb, bool reverse) {
  if (!reverse) return block_forward_dir(cfg, p, k, x, sb);
  return reverse_time(block_forward_dir(cfg, p, k, reverse_time(x, sb), sb), sb);
}

Var run_blocks(const EncoderConfig& cfg, const BoundParams& p, Var x, SeqBatch sb) {
  if (x.dim(0) != sb.length * sb.batch) throw ShapeError("run_blocks: sequence rows do not match length x batch");
  for (std::size_t k = 0; k < cfg.n_blocks(); ++k)
    x = block_forward(cfg, p, k, x, sb, cfg.bidir == BidirMode::kAlternate && k % 2 == 1);
  return x;
}

Var pool(const EncoderConfig& cfg, const BoundParams& p, Var reps, SeqBatch sb, PoolMode mode) {
  const std::size_t N = sb.length, B = sb.batch, E = cfg.embed_dim, H = cfg.n_heads, d = cfg.head_dim();
  if (N == 0 || B == 0) throw ContractError("pool: empty sequence");
  const Var r3 = ops::reshape(reps, {N, B, E});
  switch (mode) {
    case PoolMode::kAvg: return ops::mean(r3, 0);
    case PoolMode::kMax: return ops::max(r3, 0);
    case PoolMode::kAttn: break;
  }
  const Var seq = ops::reshape(ops::permute(ops::reshape(reps, {N, B, H, d}), {1, 2, 0, 3}), {B * H, N, d});
  const Var q = ops::reshape(ops::expand(ops::reshape(p["pool.query"], {1, H, d, 1}), {B, H, d, 1}), {B * H, d, 1});
  const Var scores = ops::scale(ops::reshape(ops::bmm(seq, q), {B * H, N}), 1.0 / std::sqrt(static_cast<double>(d)));
  const Var w = ops::reshape(ops::softmax(scores, 1), {B * H, 1, N});
  return ops::reshape(ops::bmm(w, seq), {B, E});
}

// ---- inference path ----------------------------------------------------------------

Tensor embed_fast(const EncoderConfig& cfg, const ParamSet& p, const Tensor& patches) {
  if (patches.rank() != 2 || patches.dim(1) != cfg.patch_width())
    throw ConfigError("embed: patches of width " + std::to_string(patches.shape().back()) + " but the encoder expects " +
                      std::to_string(cfg.patch_width()));
  const std::size_t M = patches.dim(0), E = cfg.embed_dim;
  Tensor out({M, E});
  MapMat o(out.data(), M, E);
  o.noalias() = CMapMat(patches.data(), M, cfg.patch_width()) * CMapMat(p.at("embed.W").data(), cfg.patch_width(), E);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(p.at("embed.b").data(), E);
  return out;
}

namespace {

void layer_norm_rows(const double* x, double* y, std::size_t rows, std::size_t d, const double* g, const double* b) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (row[j] - mu) * rs * g[j] + b[j];
  }
}

RowMat project_in(const ParamSet& p, std::size_t k, const Tensor& xn) {
  const Tensor& W = p.at(bname(k, "W_in"));
  const std::size_t rows = xn.dim(0), E = xn.dim(1), G = W.dim(1);
  RowMat pre = CMapMat(xn.data(), rows, E) * CMapMat(W.data(), E, G);
  pre.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(p.at(bname(k, "b_in")).data(), G);
  return pre;
}

Tensor slstm_scan_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, const Tensor& xn, SeqBatch sb) {
  const std::size_t E = cfg.embed_dim, B = sb.batch, N = sb.length;
  const RowMat pre = project_in(p, k, xn);
  const CMapMat R(p.at(bname(k, "R")).data(), E, 4 * E);
  RowMat h = RowMat::Zero(B, E), c = h, n = h, m = h, g(B, 4 * E);
  Tensor out({N * B, E});
  for (std::size_t t = 0; t < N; ++t) {
    if (t == 0) {
      g = pre.middleRows(0, B);
    } else {
      g.noalias() = h * R;
      g += pre.middleRows(t * B, B);
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < E; ++j) {
        const double z = std::tanh(g(b, j)), it = g(b, E + j), ft = g(b, 2 * E + j), o = sigmoid(g(b, 3 * E + j));
        const double fm = ft + m(b, j);
        const double mn = fm >= it ? fm : it;
        const double ip = std::exp(it - mn), fp = std::exp(fm - mn);
        c(b, j) = fp * c(b, j) + ip * z;
        n(b, j) = fp * n(b, j) + ip;
        m(b, j) = mn;
        h(b, j) = o * (c(b, j) / std::max(n(b, j), kMinNorm));
      }
    check_finite(h.data(), h.size(), k, 's', t);
    MapMat(out.data() + t * B * E, B, E) = h;
  }
  return out;
}

Tensor mlstm_scan_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, const Tensor& xn, SeqBatch sb) {
  const std::size_t E = cfg.embed_dim, H = cfg.n_heads, d = cfg.head_dim(), B = sb.batch, N = sb.length;
  const RowMat pre = project_in(p, k, xn);
  std::vector<double> C(B * H * d * d, 0.0), nv(B * H * d, 0.0), m(B * H, 0.0);
  Tensor out({N * B, E});
  for (std::size_t t = 0; t < N; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      const double* row = pre.data() + (t * B + b) * pre.cols();
      double* hrow = out.data() + (t * B + b) * E;
      for (std::size_t hd = 0; hd < H; ++hd) {
        const std::size_t bh = b * H + hd;
        const double* q = row + hd * d;
        const double* kk = row + E + hd * d;
        const double* v = row + 2 * E + hd * d;
        const double it = row[4 * E + hd], ft = row[4 * E + H + hd];
        double* Cb = C.data() + bh * d * d;
        double* nb = nv.data() + bh * d;
        const double fm = ft + m[bh];
        const double mn = fm >= it ? fm : it;
        const double ip = std::exp(it - mn), fp = std::exp(fm - mn);
        m[bh] = mn;
        for (std::size_t a = 0; a < d; ++a) {
          for (std::size_t ci = 0; ci < d; ++ci) Cb[a * d + ci] = Cb[a * d + ci] * fp + (v[a] * kk[ci]) * ip;
          nb[a] = nb[a] * fp + kk[a] * ip;
        }
        double dot = 0.0;
        for (std::size_t a = 0; a < d; ++a) dot += nb[a] * q[a];
        const double inv = 1.0 / std::max(std::abs(dot), 1.0);
        for (std::size_t a = 0; a < d; ++a) {
          double num = 0.0;
          for (std::size_t ci = 0; ci < d; ++ci) num += Cb[a * d + ci] * q[ci];
          hrow[hd * d + a] = sigmoid(row[3 * E + hd * d + a]) * (num * inv);
        }
      }
    }
    check_finite(out.data() + t * B * E, B * E, k, 'm', t);
  }
  return out;
}

void reverse_time_inplace(Tensor& x, SeqBatch sb) {
  const std::size_t w = x.dim(1) * sb.batch;
  for (std::size_t a = 0, b = sb.length - 1; a < b; ++a, --b)
    std::swap_ranges(x.data() + a * w, x.data() + (a + 1) * w, x.data() + b * w);
}

}  // namespace

Tensor cell_scan_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, const Tensor& xn, SeqBatch sb,
                      bool reverse) {
  auto scan = [&](const Tensor& in) {
    return cfg.block_pattern.at(k) == 's' ? slstm_scan_fast(cfg, p, k, in, sb) : mlstm_scan_fast(cfg, p, k, in, sb);
  };
  if (!reverse) return scan(xn);
  Tensor r = xn;
  reverse_time_inplace(r, sb);
  Tensor h = scan(r);
  reverse_time_inplace(h, sb);
  return h;
}

namespace {

void block_forward_dir_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, Tensor& x, SeqBatch sb) {
  const std::size_t rows = x.dim(0), E = cfg.embed_dim;
  Tensor xn({rows, E});
  layer_norm_rows(x.data(), xn.data(), rows, E, p.at(bname(k, "ln_g")).data(), p.at(bname(k, "ln_b")).data());
  Tensor h = cell_scan_fast(cfg, p, k, xn, sb, false);
  if (cfg.bidir == BidirMode::kPairedSum) {
    const Tensor other = cell_scan_fast(cfg, p, k, xn, sb, true);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += other[i];
  }
  MapMat xm(x.data(), rows, E);
  xm.noalias() += CMapMat(h.data(), rows, E) * CMapMat(p.at(bname(k, "W_out")).data(), E, E);
  xm.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(p.at(bname(k, "b_out")).data(), E);
}

}  // namespace

void block_forward_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, Tensor& x, SeqBatch sb,
                        bool reverse) {
  if (reverse) reverse_time_inplace(x, sb);
  block_forward_dir_fast(cfg, p, k, x, sb);
  if (reverse) reverse_time_inplace(x, sb);
}

void run_blocks_fast(const EncoderConfig& cfg, const ParamSet& p, Tensor& x, SeqBatch sb) {
  if (x.dim(0) != sb.length * sb.batch) throw ShapeError("run_blocks: sequence rows do not match length x batch");
  for (std::size_t k = 0; k < cfg.n_blocks(); ++k)
    block_forward_fast(cfg, p, k, x, sb, cfg.bidir == BidirMode::kAlternate && k % 2 == 1);
}

Tensor pool_fast(const EncoderConfig& cfg, const ParamSet& p, const Tensor& reps, SeqBatch sb, PoolMode mode) {
  const std::size_t N = sb.length, B = sb.batch, E = cfg.embed_dim, H = cfg.n_heads, d = cfg.head_dim();
  if (N == 0 || B == 0) throw ContractError("pool: empty sequence");
  Tensor out({B, E});
  auto row = [&](std::size_t t, std::size_t b) { return reps.data() + (t * B + b) * E; };
  for (std::size_t b = 0; b < B; ++b) {
    double* o = out.data() + b * E;
    if (mode == PoolMode::kAvg) {
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t j = 0; j < E; ++j) o[j] += row(t, b)[j];
      for (std::size_t j = 0; j < E; ++j) o[j] *= 1.0 / static_cast<double>(N);
    } else if (mode == PoolMode::kMax) {
      std::copy_n(row(0, b), E, o);
      for (std::size_t t = 1; t < N; ++t)
        for (std::size_t j = 0; j < E; ++j) o[j] = std::max(o[j], row(t, b)[j]);
    } else {
      const double* q = p.at("pool.query").data();
      const double scale = 1.0 / std::sqrt(static_cast<double>(d));
      std::vector<double> w(N);
      for (std::size_t hd = 0; hd < H; ++hd) {
        double mx = -INFINITY;
        for (std::size_t t = 0; t < N; ++t) {
          double s = 0.0;
          for (std::size_t j = 0; j < d; ++j) s += row(t, b)[hd * d + j] * q[hd * d + j];
          w[t] = s * scale;
          mx = std::max(mx, w[t]);
        }
        double z = 0.0;
        for (auto& v : w) z += (v = std::exp(v - mx));
        for (std::size_t t = 0; t < N; ++t)
          for (std::size_t j = 0; j < d; ++j) o[hd * d + j] += (w[t] / z) * row(t, b)[hd * d + j];
      }
    }
  }
  return out;
}

namespace {

EcgRecord to_encoder_layout(const EncoderConfig& cfg, const EcgRecord& record) {
  if (std::abs(record.fs - cfg.model_rate_hz) > 1e-9)
    throw ContractError("encode: record at " + std::to_string(record.fs) + " Hz, expected the model rate " +
                        std::to_string(cfg.model_rate_hz) + " Hz; resample first");
  EcgRecord r = pad_leads(record);
  if (cfg.in_channels == 1) {
    Tensor lead({1, r.length()});
    std::copy_n(r.samples.data() + kLeadII * r.length(), r.length(), lead.data());
    r.samples = std::move(lead);
  }
  return r;
}

}  // namespace

Tensor record_patches(const EncoderConfig& cfg, const EcgRecord& record) {
  return patch_matrix(to_encoder_layout(cfg, record), cfg.patch_size);
}

Tensor encode_patches(const EncoderConfig& cfg, const ParamSet& p, const Tensor& patches) {
  Tensor x = embed_fast(cfg, p, patches);
  run_blocks_fast(cfg, p, x, {patches.dim(0), 1});
  return x;
}

PatchReps encode(const EncoderConfig& cfg, const ParamSet& p, const EcgRecord& record) {
  const EcgRecord r = to_encoder_layout(cfg, record);
  PatchReps out;
  out.plan = plan_patches(r.length(), cfg.patch_size, cfg.model_rate_hz);
  out.reps = encode_patches(cfg, p, patch_matrix(r, cfg.patch_size));
  return out;
}

Tensor embed_record(const EncoderConfig& cfg, const ParamSet& p, const EcgRecord& record, PoolMode mode) {
  const PatchReps reps = encode(cfg, p, record);
  return pool_fast(cfg, p, reps.reps, {reps.plan.n_patches, 1}, mode).reshaped({cfg.embed_dim});
}

// ---- checkpoints -------------------------------------------------------------------

namespace {

constexpr char kCkMagic[4] = {'X', 'C', 'K', 'P'};
constexpr std::uint32_t kCkVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), b, b + sizeof(T));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw CheckpointError("checkpoint truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(kCkMagic, kCkMagic + 4);
  put<std::uint32_t>(out, kCkVersion);
  const std::string cfg = ck.config.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& name = ck.params.name(i);
    const auto& t = ck.params.value(i);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto dim : t.shape()) put<std::uint64_t>(out, dim);
    for (double v : t.values()) put<double>(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkMagic, 4) != 0) throw CheckpointError("not a checkpoint file");
  Reader r{bytes, 4};
  const auto version = r.get<std::uint32_t>();
  if (version != kCkVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto cfg_len = r.get<std::uint32_t>();
  try {
    ck.config = nlohmann::json::parse(r.str(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw CheckpointError("tensor " + name + " has rank 0");
    Shape s(rank);
    for (auto& d : s) d = r.get<std::uint64_t>();
    const std::size_t n = numel(s);
    if (r.pos + n * sizeof(double) > bytes.size()) throw CheckpointError("checkpoint truncated in " + name);
    Tensor t(s);
    std::memcpy(t.data(), bytes.data() + r.pos, n * sizeof(double));
    r.pos += n * sizeof(double);
    ck.params.add(name, std::move(t));
  }
  if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::uint64_t params_hash(const ParamSet& p) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < p.size(); ++i) {
    mix(p.name(i).data(), p.name(i).size());
    for (auto d : p.value(i).shape()) mix(&d, sizeof(d));
    mix(p.value(i).data(), p.value(i).size() * sizeof(double));
  }
  return h;
}

}  // namespace xecg
