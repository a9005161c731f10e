#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/rng.hpp"
#include "xecg/signal.hpp"
#include "xecg/tape.hpp"

namespace xecg {

enum class PoolMode { kAvg, kMax, kAttn };
const char* to_string(PoolMode m);
PoolMode pool_mode_from_string(const std::string& s);

/// How block k realises bidirectionality. kAlternate: even blocks scan
/// forward, odd blocks scan in reverse. kPairedSum: every block scans both
/// ways with shared cell weights and sums the two hidden sequences.
enum class BidirMode { kAlternate, kPairedSum };

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::string block_pattern = "ssmmssmms";
  std::size_t patch_size = 25;
  std::size_t in_channels = kLeadSlots;
  std::size_t n_heads = 4;
  double model_rate_hz = 100.0;
  BidirMode bidir = BidirMode::kAlternate;

  std::size_t head_dim() const { return embed_dim / n_heads; }
  std::size_t patch_width() const { return in_channels * patch_size; }
  std::size_t n_blocks() const { return block_pattern.size(); }
  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

/// Named tensors in a fixed insertion order (the order used for checkpoints,
/// hashing and optimizer state).
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  std::size_t scalar_count() const;
  bool all_finite() const;
  /// Throws CheckpointError unless both sets have the same names and shapes in order.
  void require_same_layout(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameter names:
///   embed.W [C*P x E], embed.b [E]
///   block{k}.ln_g, block{k}.ln_b [E]
///   block{k}.W_in, block{k}.b_in    sLSTM: [E x 4E] gates (z, i, f, o); mLSTM: [E x 4E+2H] (q, k, v, o, i, f)
///   block{k}.R [E x 4E]             sLSTM only, recurrent weights
///   block{k}.W_out [E x E], block{k}.b_out [E]
///   pool.query [H x E/H]
ParamSet init_encoder(const EncoderConfig& cfg, Rng& rng);

/// Depth of a parameter for layer-wise learning-rate decay: embed 0, block k
/// at k+1, pool and anything else (heads) at n_blocks+1.
std::size_t param_layer(const std::string& name, std::size_t n_blocks);

/// Parameters placed on a tape as leaves, addressable by name.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamSet& params, bool requires_grad = true);
  /// Adopts existing tape values, one per entry of `layout` in order.
  BoundParams(const ParamSet& layout, std::vector<Var> vars);
  Var operator[](const std::string& name) const;
  Var var(std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }
  const ParamSet& params() const { return *params_; }

 private:
  const ParamSet* params_;
  std::vector<Var> vars_;
};

/// A batch of B equal-length sequences stored time-major: row t*B + b.
struct SeqBatch {
  std::size_t length = 0;
  std::size_t batch = 0;
};

/// Stacks B patch matrices [N x C*P] into time-major [N*B x C*P].
Tensor stack_time_major(std::span<const Tensor> per_sample);
/// Row block of sample b from a time-major [N*B x D] matrix, as [N x D].
Tensor unstack_sample(const Tensor& time_major, std::size_t batch, std::size_t b);

// ---- differentiable path -----------------------------------------------------------

/// e_i = flatten(p_i) W + b for every row of [M x C*P].
Var embed(const EncoderConfig& cfg, const BoundParams& p, Var patches);
/// One pre-norm residual block. `reverse` selects the scan direction.
Var block_forward(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var x, SeqBatch sb, bool reverse);
/// Runs the block stack over an embedded time-major sequence.
Var run_blocks(const EncoderConfig& cfg, const BoundParams& p, Var x, SeqBatch sb);
/// Pooled [B x E] summary of a time-major [N*B x E] sequence.
Var pool(const EncoderConfig& cfg, const BoundParams& p, Var reps, SeqBatch sb, PoolMode mode);

/// Hidden sequence of a bare cell scan (no norm, projection or residual), time-major [N*B x E].
Var cell_scan(const EncoderConfig& cfg, const BoundParams& p, std::size_t k, Var xn, SeqBatch sb, bool reverse);

// ---- inference path (no tape) ------------------------------------------------------

Tensor embed_fast(const EncoderConfig& cfg, const ParamSet& p, const Tensor& patches);
/// Updates the time-major sequence in place, block by block.
void run_blocks_fast(const EncoderConfig& cfg, const ParamSet& p, Tensor& x, SeqBatch sb);
void block_forward_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, Tensor& x, SeqBatch sb,
                        bool reverse);
Tensor cell_scan_fast(const EncoderConfig& cfg, const ParamSet& p, std::size_t k, const Tensor& xn, SeqBatch sb,
                      bool reverse);
Tensor pool_fast(const EncoderConfig& cfg, const ParamSet& p, const Tensor& reps, SeqBatch sb, PoolMode mode);

struct PatchReps {
  Tensor reps;  // [N x E]
  PatchPlan plan;
};

/// Patchify (12-slot layout at the model rate), embed and run every block.
PatchReps encode(const EncoderConfig& cfg, const ParamSet& p, const EcgRecord& record);
/// Patch matrix [N x C*P] of a record in the encoder's channel layout
/// (model rate required, absent leads zero, lead II only when C = 1).
Tensor record_patches(const EncoderConfig& cfg, const EcgRecord& record);
/// Same for an already-built patch matrix [N x C*P].
Tensor encode_patches(const EncoderConfig& cfg, const ParamSet& p, const Tensor& patches);
/// Pooled representation of one record.
Tensor embed_record(const EncoderConfig& cfg, const ParamSet& p, const EcgRecord& record, PoolMode mode);

// ---- checkpoints -------------------------------------------------------------------

struct Checkpoint {
  nlohmann::json config;
  ParamSet params;
};

/// Binary container: magic "XCKP", u32 version, u32 config length, config
/// JSON, u32 tensor count, then per tensor: u16 name length, name, u8 rank,
/// u64 dims, f64 data. Little-endian host order.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// FNV-1a over names, shapes and data; stable across runs.
std::uint64_t params_hash(const ParamSet& p);

}  // namespace xecg
