#include "xecg/ssl.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace xecg {

void SslSchedules::validate() const {
  if (!(lambda_base >= 0.0 && lambda_base <= 1.0)) throw ConfigError("ssl.lambda_base must be in [0, 1]");
  if (!(lr >= 0.0)) throw ConfigError("ssl.lr must be >= 0");
  if (total_steps == 0) throw ConfigError("ssl.total_steps must be positive");
  if (warmup_steps > total_steps) throw ConfigError("ssl.warmup_steps exceeds total_steps");
  if (!(wd_start >= 0.0 && wd_end >= 0.0)) throw ConfigError("ssl weight decay must be >= 0");
  if (!(clip_norm > 0.0)) throw ConfigError("ssl.clip_norm must be positive");
  if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("ssl.layer_decay must be in (0, 1]");
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) throw ConfigError("ssl.p_mask must be in [0, 1]");
  if (!(eps > 0.0)) throw ConfigError("ssl.eps must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("ssl betas must be in [0, 1)");
  if (!(loss_scale > 0.0)) throw ConfigError("ssl.loss_scale must be positive");
}

nlohmann::json to_json(const SslSchedules& s) {
  return {{"lambda_base", s.lambda_base}, {"lr", s.lr},
          {"warmup_steps", s.warmup_steps}, {"total_steps", s.total_steps},
          {"wd_start", s.wd_start},         {"wd_end", s.wd_end},
          {"clip_norm", s.clip_norm},       {"layer_decay", s.layer_decay},
          {"p_mask", s.p_mask},             {"eps", s.eps},
          {"beta1", s.beta1},               {"beta2", s.beta2},
          {"adam_eps", s.adam_eps},         {"loss_scale", s.loss_scale}};
}

SslSchedules ssl_schedules_from_json(const nlohmann::json& j) {
  SslSchedules s;
  s.lambda_base = j.value("lambda_base", s.lambda_base);
  s.lr = j.value("lr", s.lr);
  s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
  s.total_steps = j.value("total_steps", s.total_steps);
  s.wd_start = j.value("wd_start", s.wd_start);
  s.wd_end = j.value("wd_end", s.wd_end);
  s.clip_norm = j.value("clip_norm", s.clip_norm);
  s.layer_decay = j.value("layer_decay", s.layer_decay);
  s.p_mask = j.value("p_mask", s.p_mask);
  s.eps = j.value("eps", s.eps);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.adam_eps = j.value("adam_eps", s.adam_eps);
  s.loss_scale = j.value("loss_scale", s.loss_scale);
  s.validate();
  return s;
}

std::string LossBreakdown::str() const {
  std::ostringstream os;
  os.precision(10);
  os << "l_patch=" << l_patch << " l_view=" << l_view << " l_cr=" << l_cr << " total=" << total;
  return os.str();
}

TeacherStudentState init_ssl_state(const EncoderConfig& cfg, const SslSchedules& s, Rng& rng) {
  cfg.validate();
  TeacherStudentState st;
  st.cfg = cfg;
  st.student = init_encoder(cfg, rng);
  st.teacher = st.student;
  Tensor tok({cfg.embed_dim});
  for (double& v : tok.values()) v = rng.normal(0.0, 0.02);
  st.token.add("mask_token", std::move(tok));
  st.opt_student = AdamW(st.student, s.beta1, s.beta2, s.adam_eps);
  st.opt_token = AdamW(st.token, s.beta1, s.beta2, s.adam_eps);
  return st;
}

double momentum_schedule(std::size_t t, std::size_t total, double lambda_base) {
  if (total == 0) throw ConfigError("momentum_schedule: total steps must be positive");
  if (t > total) throw ConfigError("momentum_schedule: step beyond total");
  return lambda_base + (static_cast<double>(t) / static_cast<double>(total)) * (1.0 - lambda_base);
}

void ema_update(ParamSet& teacher, const ParamSet& student, double lambda) {
  teacher.require_same_layout(student);
  const double a = 1.0 - lambda;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    double* t = teacher.value(i).data();
    const double* s = student.value(i).data();
    for (std::size_t j = 0; j < teacher.value(i).size(); ++j) t[j] = lambda * t[j] + a * s[j];
  }
}

MaskedSeq mask_patches(Var seq, double p, Var token, Rng& rng) {
  if (seq.shape().size() != 2 || seq.dim(0) == 0) throw ShapeError("mask_patches: expected a non-empty [n x E] sequence");
  const std::size_t n = seq.dim(0), e = seq.dim(1);
  if (token.value().size() != e) throw ShapeError("mask_patches: token width differs from the sequence");
  MaskedSeq out;
  Tensor keep({n}, 1.0), hit({n}, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    if (rng.bernoulli(p)) {
      keep[r] = 0.0;
      hit[r] = 1.0;
      out.index.push_back(r);
    }
  if (out.index.empty()) {
    out.seq = seq;
    return out;
  }
  Tape& tape = *seq.tape();
  const Var tok_rows = ops::expand(ops::reshape(token, {1, e}), {n, e});
  out.seq = ops::add(ops::scale_rows(seq, tape.constant(std::move(keep))),
                     ops::scale_rows(tok_rows, tape.constant(std::move(hit))));
  return out;
}

Var loss_patch(Var student, Var teacher, std::span<const std::size_t> masked) {
  if (student.shape() != teacher.shape() || student.shape().size() != 2)
    throw ShapeError("loss_patch: student and teacher must be equal [n x E] matrices");
  Tape& tape = *student.tape();
  if (masked.empty()) {
    spdlog::debug("loss_patch: no masked patches, term is 0");
    return tape.constant(Tensor::scalar(0.0));
  }
  const std::size_t n = student.dim(0);
  Tensor w({n}, 0.0);
  const double inv = 1.0 / static_cast<double>(masked.size());
  for (std::size_t i : masked) {
    if (i >= n) throw ShapeError("loss_patch: mask index out of range");
    w[i] += inv;
  }
  const Var d = ops::sub(ops::l2_normalize(student, 1), ops::l2_normalize(teacher, 1));
  return ops::sum_all(ops::mul(ops::sum(ops::square(d), 1), tape.constant(std::move(w))));
}

Var weighted_pair_distance(Var t, Var s, const Tensor& weights) {
  if (t.shape().size() != 2 || s.shape().size() != 2 || t.dim(1) != s.dim(1))
    throw ShapeError("pair distance: expected [G x E] and [K x E]");
  if (weights.rank() != 2 || weights.dim(0) != t.dim(0) || weights.dim(1) != s.dim(0))
    throw ShapeError("pair distance: weights must be [G x K]");
  Tape& tape = *t.tape();
  const std::size_t g = t.dim(0), k = s.dim(0), e = t.dim(1);
  const Var te = ops::expand(ops::reshape(t, {g, 1, e}), {g, k, e});
  const Var se = ops::expand(ops::reshape(s, {1, k, e}), {g, k, e});
  const Var d2 = ops::sum(ops::square(ops::sub(te, se)), 2);
  return ops::sum_all(ops::mul(d2, tape.constant(weights)));
}

Var loss_view(Var teacher, Var student) {
  const std::size_t g = teacher.dim(0), k = student.dim(0);
  if (g == 0 || k < g) throw ShapeError("loss_view: need 1 <= G <= K");
  Tensor w({g, k}, 1.0);
  for (std::size_t i = 0; i < g; ++i) w.at(i, i) = 0.0;
  return weighted_pair_distance(ops::l2_normalize(teacher, 1), ops::l2_normalize(student, 1), w);
}

Var coding_rate(Var z, double eps) {
  if (z.shape().size() != 2) throw ShapeError("coding_rate: expected [B x E]");
  const std::size_t b = z.dim(0), e = z.dim(1);
  if (b < 2) throw ContractError("coding_rate: needs at least 2 rows");
  Tape& tape = *z.tape();
  const Var zc = ops::sub(z, ops::mean(z, 0));
  const Var cov = ops::scale(ops::matmul(ops::transpose(zc), zc), 1.0 / static_cast<double>(b));
  const Var m = ops::add(tape.constant(Tensor::identity(e)), ops::scale(cov, static_cast<double>(e) / eps));
  try {
    return ops::scale(ops::logdet_psd(m), 0.5);
  } catch (const DefinitenessError&) {
    spdlog::warn("coding_rate: Cholesky failed, retrying with 1e-6 jitter");
    const Var mj = ops::add(m, ops::scale(tape.constant(Tensor::identity(e)), 1e-6));
    return ops::scale(ops::logdet_psd(mj), 0.5);
  }
}

double coding_rate_gamma(double eps, std::size_t batch, std::size_t dim) {
  const double b = static_cast<double>(batch), e = static_cast<double>(dim);
  return eps * std::sqrt(b / (e * std::min(e, b)));
}

Var loss_cr(Var z, double eps) {
  return ops::scale(coding_rate(z, eps), -coding_rate_gamma(eps, z.dim(0), z.dim(1)));
}

double loss_patch(const Tensor& student, const Tensor& teacher, std::span<const std::size_t> masked) {
  Tape tape;
  return loss_patch(tape.constant(student), tape.constant(teacher), masked).value().item();
}

double loss_view(const Tensor& teacher, const Tensor& student) {
  Tape tape;
  return loss_view(tape.constant(teacher), tape.constant(student)).value().item();
}

double coding_rate(const Tensor& z, double eps) {
  Tape tape;
  return coding_rate(tape.constant(z), eps).value().item();
}

double coding_rate_of_cov(const Tensor& gamma, double eps) {
  const std::size_t e = gamma.dim(0);
  Tensor m = Tensor::identity(e);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] += static_cast<double>(e) / eps * gamma[i];
  return 0.5 * logdet_psd(m);
}

double loss_cr(const Tensor& z, double eps) {
  Tape tape;
  return loss_cr(tape.constant(z), eps).value().item();
}

// ---- batches -----------------------------------------------------------------------

ViewBatch render_batch(std::span<const std::vector<EcgRecord>> patients, std::size_t patch_size,
                       const AugmentConfig& aug, Rng& rng) {
  ViewBatch vb;
  vb.n_global = aug.n_global;
  const std::size_t k = aug.n_global + aug.n_local;
  vb.views.resize(patients.size());
  for (std::size_t b = 0; b < patients.size(); ++b) {
    const ViewSet vs = make_views(patients[b], patch_size, aug, rng);
    for (std::size_t v = 0; v < k; ++v) {
      const CropWindow& w = v < aug.n_global ? vs.globals[v] : vs.locals[v - aug.n_global];
      vb.views[b].push_back(crop(pad_leads(patients[b][w.source]), w.start, w.length));
    }
  }
  if (aug.swap_baseline) {
    // one swap per view slot, among crops that share length and rate
    for (std::size_t v = 0; v < k; ++v) {
      std::map<std::pair<std::size_t, double>, std::vector<std::size_t>> groups;
      for (std::size_t b = 0; b < vb.views.size(); ++b)
        groups[{vb.views[b][v].length(), vb.views[b][v].fs}].push_back(b);
      for (const auto& [key, members] : groups) {
        std::vector<EcgRecord> slot;
        for (std::size_t b : members) slot.push_back(vb.views[b][v]);
        auto swapped = baseline_swap(slot, aug, rng);
        for (std::size_t i = 0; i < members.size(); ++i) vb.views[members[i]][v] = std::move(swapped[i]);
      }
    }
  }
  for (auto& per : vb.views)
    for (auto& r : per) r = amp_scale(jitter(lead_dropout(r, aug, rng), aug, rng), aug, rng);
  return vb;
}

namespace {

struct ViewRef {
  std::size_t b, v;
};

struct ViewGroup {
  bool global = false;
  std::size_t length = 0;
  std::vector<ViewRef> members;
  Tensor patches;  // time-major [N*n x C*P]
};

std::vector<ViewGroup> group_views(const EncoderConfig& cfg, const ViewBatch& vb) {
  std::map<std::pair<int, std::size_t>, ViewGroup> by_key;
  std::map<std::pair<int, std::size_t>, std::vector<Tensor>> mats;
  for (std::size_t b = 0; b < vb.views.size(); ++b)
    for (std::size_t v = 0; v < vb.views[b].size(); ++v) {
      Tensor pm = record_patches(cfg, vb.views[b][v]);
      const bool global = v < vb.n_global;
      // globals first in the map order
      const std::pair<int, std::size_t> key{global ? 0 : 1, pm.dim(0)};
      auto& g = by_key[key];
      g.global = global;
      g.length = pm.dim(0);
      g.members.push_back({b, v});
      mats[key].push_back(std::move(pm));
    }
  std::vector<ViewGroup> out;
  for (auto& [key, g] : by_key) {
    g.patches = stack_time_major(mats[key]);
    out.push_back(std::move(g));
  }
  return out;
}

Tensor normalize_rows(const Tensor& x) {
  Tensor out = x;
  const std::size_t n = x.dim(0), e = x.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < e; ++c) ss += x.at(r, c) * x.at(r, c);
    const double nrm = std::sqrt(ss);
    if (nrm == 0.0) throw DomainError("normalize_rows: zero-norm vector");
    for (std::size_t c = 0; c < e; ++c) out.at(r, c) = x.at(r, c) / nrm;
  }
  return out;
}

}  // namespace

StepReport pretrain_step(TeacherStudentState& st, const SslSchedules& s, const ViewBatch& vb, Rng& rng) {
  const EncoderConfig& cfg = st.cfg;
  const std::size_t B = vb.views.size();
  if (B == 0) throw ContractError("pretrain_step: empty batch");
  const std::size_t K = vb.views[0].size(), G = vb.n_global;
  if (G == 0 || K < G) throw ContractError("pretrain_step: need at least one global view");
  for (const auto& per : vb.views)
    if (per.size() != K) throw ContractError("pretrain_step: every patient needs the same number of views");
  const std::size_t E = cfg.embed_dim;

  std::vector<ViewGroup> groups = group_views(cfg, vb);

  // Teacher: unmasked globals through the inference path with its own pool query.
  std::vector<Tensor> teacher_reps(groups.size());
  Tensor zt({B * G, E});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const ViewGroup& g = groups[gi];
    if (!g.global) continue;
    const SeqBatch sb{g.length, g.members.size()};
    Tensor x = embed_fast(cfg, st.teacher, g.patches);
    run_blocks_fast(cfg, st.teacher, x, sb);
    const Tensor z = pool_fast(cfg, st.teacher, x, sb, PoolMode::kAttn);
    for (std::size_t i = 0; i < g.members.size(); ++i) {
      const ViewRef r = g.members[i];
      std::copy_n(z.data() + i * E, E, zt.data() + (r.b * G + r.v) * E);
    }
    teacher_reps[gi] = std::move(x);
  }
  const Tensor zt_hat = normalize_rows(zt);

  // Student: every view, globals masked.
  Tape tape;
  const BoundParams p(tape, st.student);
  const Var token = tape.leaf(st.token.value(0));
  std::vector<Var> s_rows, t_rows, pooled;
  std::vector<std::size_t> masked;
  std::size_t patch_offset = 0;
  std::vector<ViewRef> pooled_order;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const ViewGroup& g = groups[gi];
    const SeqBatch sb{g.length, g.members.size()};
    Var x = embed(cfg, p, tape.constant(g.patches));
    if (g.global) {
      MaskedSeq ms = mask_patches(x, s.p_mask, token, rng);
      for (std::size_t r : ms.index) masked.push_back(patch_offset + r);
      x = ms.seq;
    }
    const Var reps = run_blocks(cfg, p, x, sb);
    if (g.global) {
      s_rows.push_back(reps);
      t_rows.push_back(tape.constant(teacher_reps[gi]));
      patch_offset += reps.dim(0);
    }
    pooled.push_back(pool(cfg, p, reps, sb, PoolMode::kAttn));
    pooled_order.insert(pooled_order.end(), g.members.begin(), g.members.end());
  }

  const Var l_patch = loss_patch(ops::concat(s_rows, 0), ops::concat(t_rows, 0), masked);
  if (masked.empty()) spdlog::info("pretrain_step {}: no patch was masked, l_patch = 0", st.step);

  const Var zs_hat = ops::l2_normalize(ops::concat(pooled, 0), 1);
  Tensor w({B * G, pooled_order.size()}, 0.0);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t j = 0; j < pooled_order.size(); ++j) {
    const ViewRef r = pooled_order[j];
    for (std::size_t i = 0; i < G; ++i)
      if (r.v != i) w.at(r.b * G + i, j) = inv_b;
  }
  const Var l_view = weighted_pair_distance(tape.constant(zt_hat), zs_hat, w);
  const Var l_cr = loss_cr(zs_hat, s.eps);
  const Var total = ops::add(ops::add(l_patch, l_view), l_cr);

  StepReport rep;
  rep.loss = {l_patch.value().item(), l_view.value().item(), l_cr.value().item(), total.value().item()};
  rep.n_masked = masked.size();
  if (!std::isfinite(rep.loss.total)) {
    spdlog::error("pretrain_step {}: non-finite loss ({})", st.step, rep.loss.str());
    throw NumericError("pretrain_step " + std::to_string(st.step) + ": non-finite loss, " + rep.loss.str());
  }

  tape.backward(s.loss_scale == 1.0 ? total : ops::scale(total, s.loss_scale));
  std::vector<Tensor> grads;
  grads.reserve(p.size() + 1);
  for (std::size_t i = 0; i < p.size(); ++i) {
    grads.push_back(tape.grad(p.var(i)));
    rep.grad_norms.push_back(global_norm({&grads.back(), 1}));
  }
  grads.push_back(tape.grad(token));
  rep.clip = clip_grad_norm(grads, s.clip_norm);

  rep.lr = cosine_lr(s.lr, st.step, s.warmup_steps, s.total_steps);
  rep.wd = linear_ramp(s.wd_start, s.wd_end, st.step, s.total_steps);
  const auto scales = layer_lr_scales(st.student, cfg.n_blocks(), s.layer_decay);
  st.opt_student.step(st.student, {grads.data(), p.size()}, rep.lr, scales, rep.wd);
  const double tok_scale = std::pow(s.layer_decay, static_cast<double>(cfg.n_blocks() + 1));
  st.opt_token.step(st.token, {&grads.back(), 1}, rep.lr, {&tok_scale, 1}, rep.wd);

  rep.lambda = momentum_schedule(std::min(st.step, s.total_steps), s.total_steps, s.lambda_base);
  ema_update(st.teacher, st.student, rep.lambda);
  ++st.step;
  return rep;
}

LossLog::LossLog(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot open loss log " + path.string());
  out_ << "step,l_patch,l_view,l_cr,total,lr,lambda\n";
  out_.precision(12);
}

void LossLog::append(std::size_t step, const StepReport& r) {
  out_ << step << ',' << r.loss.l_patch << ',' << r.loss.l_view << ',' << r.loss.l_cr << ',' << r.loss.total << ','
       << r.lr << ',' << r.lambda << '\n';
  out_.flush();
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"encoder", to_json(c.encoder)}, {"augment", to_json(c.augment)},   {"ssl", to_json(c.schedules)},
          {"batch_size", c.batch_size},    {"seed", c.seed},                  {"corpus", c.corpus},
          {"checkpoint_every", c.checkpoint_every}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig c;
  if (j.contains("encoder")) c.encoder = encoder_config_from_json(j["encoder"]);
  if (j.contains("augment")) c.augment = augment_config_from_json(j["augment"]);
  if (j.contains("ssl")) c.schedules = ssl_schedules_from_json(j["ssl"]);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.corpus = j.value("corpus", c.corpus);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  return c;
}

std::vector<std::vector<EcgRecord>> group_by_patient(std::span<const EcgRecord> records) {
  std::vector<std::vector<EcgRecord>> out;
  std::map<std::string, std::size_t> slot;
  for (const auto& r : records) {
    auto [it, fresh] = slot.emplace(r.patient_id, out.size());
    if (fresh) out.emplace_back();
    out[it->second].push_back(r);
  }
  return out;
}

PretrainResult pretrain(const PretrainConfig& cfg, std::span<const std::vector<EcgRecord>> patients,
                        const std::filesystem::path& out_dir) {
  cfg.encoder.validate();
  cfg.schedules.validate();
  cfg.augment.validate(cfg.encoder.model_rate_hz);
  if (patients.empty()) throw ContractError("pretrain: empty corpus");
  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  PretrainResult res{init_ssl_state(cfg.encoder, cfg.schedules, init_rng), {}};
  std::unique_ptr<LossLog> log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log = std::make_unique<LossLog>(out_dir / "loss.csv");
  }
  auto save = [&](const std::string& tag) {
    if (out_dir.empty()) return;
    write_checkpoint(out_dir / ("student" + tag + ".xckp"), {to_json(cfg.encoder), res.state.student});
    write_checkpoint(out_dir / ("teacher" + tag + ".xckp"), {to_json(cfg.encoder), res.state.teacher});
  };
  const std::size_t bs = std::min(cfg.batch_size, patients.size());
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < cfg.schedules.total_steps; ++step) {
    std::vector<std::vector<EcgRecord>> batch;
    for (std::size_t i = 0; i < bs; ++i) {
      if (cursor == order.size()) {
        order = rng.permutation(patients.size());
        cursor = 0;
      }
      batch.push_back(patients[order[cursor++]]);
    }
    const ViewBatch vb = render_batch(batch, cfg.encoder.patch_size, cfg.augment, rng);
    StepReport r = pretrain_step(res.state, cfg.schedules, vb, rng);
    spdlog::debug("step {} {} lr={:.3g} lambda={:.5f} |g|={:.3g}", step, r.loss.str(), r.lr, r.lambda, r.clip.pre_norm);
    if (log) log->append(step, r);
    res.steps.push_back(std::move(r));
    if (cfg.checkpoint_every != 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.schedules.total_steps)
      save("_" + std::to_string(step + 1));
  }
  save("");
  return res;
}

}  // namespace xecg
