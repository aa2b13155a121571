#pragma once

// The Pushdown Transformer and its Base-LM variants.
//
// Row layout of a batch: position t of sequence b is row b*T + t. Row t of
// the LM logits predicts token t+1; row t of the attachment logits predicts
// the attachment of token t+1 and has T+1 slots: 0..t reduce with token j,
// t+1 shift only, the rest -inf.
//
// Tape row t is the stack tape after token t has been attached. It feeds the
// depth-augmented keys of query t and the attachment keys of row t.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pdl/autodiff.hpp"
#include "pdl/treebank.hpp"

namespace pdl {

enum class ModelMode {
  pushdown,        // depth-augmented attention + attachment head
  base_multitask,  // plain attention + attachment head
  base_plain,      // plain attention, LM only
};

enum class AttachVariant {
  mlp,       // depth-conditioned key MLP and next-word fusion MLPs
  bilinear,  // q~ . k_j with no depth information
};

const char* mode_name(ModelMode m);
ModelMode parse_mode(const std::string& s);
const char* attach_variant_name(AttachVariant v);
AttachVariant parse_attach_variant(const std::string& s);

struct ModelConfig {
  int layers = 6;
  int heads = 4;
  int dim = 32;
  int ff_dim = 0;      // 0 -> 4 * dim
  int vocab = 0;
  int max_seq_len = 256;
  int max_depth = 16;  // depth tables have max_depth + 1 rows
  /// Layers whose attention reads the tape. Empty in pushdown mode means all.
  std::vector<int> pushdown_layers;
  double dropout = 0.0;
  ModelMode mode = ModelMode::pushdown;
  AttachVariant attach = AttachVariant::mlp;
  int attach_dim = 0;  // 0 -> dim
  /// Depths above max_depth use the last table row instead of failing.
  bool clamp_depth = true;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  int ff() const { return ff_dim > 0 ? ff_dim : 4 * dim; }
  int attach_hidden() const { return attach_dim > 0 ? attach_dim : dim; }
  bool is_pushdown_layer(int layer) const;
  bool has_attachment_head() const { return mode != ModelMode::base_plain; }

  /// Throws ConfigError.
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  /// Applies known keys from `kv`; unknown keys are errors.
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Padded batch inputs. `tape` is `[batch x T x T]`.
struct ModelInput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> next_tokens;
  std::vector<int> tape;
};

struct ForwardOutputs {
  ad::Var lm_logits;      // [BT x V]
  ad::Var attach_logits;  // [BT x (T+1)], invalid in base_plain mode
  ad::Var hidden;         // [BT x d]
};

struct LossTargets {
  std::vector<int> lm;
  std::vector<std::uint8_t> lm_ignore;
  std::vector<int> attach;
  std::vector<std::uint8_t> attach_ignore;
  std::vector<std::uint8_t> attach_keep;  // [BT x (T+1)] stack candidates of each row
};

struct LossParts {
  ad::Var total;
  ad::Var lm;
  ad::Var attach;  // invalid when the model has no attachment head
};

/// Inputs and targets for a list of sequences, right-padded to the longest.
struct BatchData {
  ModelInput input;
  LossTargets targets;
  std::vector<int> lengths;
};

class PushdownModel {
 public:
  explicit PushdownModel(ModelConfig config);
  PushdownModel(PushdownModel&&) = default;
  PushdownModel& operator=(PushdownModel&&) = default;

  const ModelConfig& config() const { return config_; }

  /// Parameters in a fixed order.
  const std::vector<ad::Parameter*>& parameters() const { return order_; }
  ad::Parameter* find(const std::string& name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Copies every parameter with a matching name and shape from `other`.
  void copy_parameters_from(const PushdownModel& other);

  /// Depth tables of the pushdown layers (empty in base modes).
  std::vector<ad::Parameter*> depth_tables() const;

  int clamp_depth(int depth) const;

  /// If `attention` is non-null it receives one `[B x H x T x T]` block per layer.
  ForwardOutputs forward(ad::Graph& g, const ModelInput& in,
                         std::vector<std::vector<double>>* attention = nullptr) const;

  BatchData make_batch(const std::vector<const Sequence*>& seqs) const;

  struct Layer {
    ad::Parameter* ln1_g;
    ad::Parameter* ln1_b;
    ad::Parameter* w_qkv;
    ad::Parameter* b_qkv;
    ad::Parameter* w_o;
    ad::Parameter* b_o;
    ad::Parameter* ln2_g;
    ad::Parameter* ln2_b;
    ad::Parameter* w_ff1;
    ad::Parameter* b_ff1;
    ad::Parameter* w_ff2;
    ad::Parameter* b_ff2;
    ad::Parameter* depth = nullptr;
  };
  struct AttachHead {
    ad::Parameter* w_qk = nullptr;
    ad::Parameter* b_qk = nullptr;
    ad::Parameter* q_w1 = nullptr;
    ad::Parameter* q_b1 = nullptr;
    ad::Parameter* q_w2 = nullptr;
    ad::Parameter* q_b2 = nullptr;
    ad::Parameter* k_w1 = nullptr;
    ad::Parameter* k_b1 = nullptr;
    ad::Parameter* k_w2 = nullptr;
    ad::Parameter* k_b2 = nullptr;
    // key MLP over [k_j ; beta(depth)], split into its two input blocks
    ad::Parameter* beta = nullptr;
    ad::Parameter* ks_w1k = nullptr;
    ad::Parameter* ks_w1d = nullptr;
    ad::Parameter* ks_b1 = nullptr;
    ad::Parameter* ks_w2 = nullptr;
    ad::Parameter* ks_b2 = nullptr;
  };

  ad::Parameter* tok_emb() const { return tok_emb_; }
  ad::Parameter* pos_emb() const { return pos_emb_; }
  const std::vector<Layer>& layers() const { return layers_; }
  ad::Parameter* lnf_g() const { return lnf_g_; }
  ad::Parameter* lnf_b() const { return lnf_b_; }
  ad::Parameter* lm_w() const { return lm_w_; }
  ad::Parameter* lm_b() const { return lm_b_; }
  const AttachHead& head() const { return head_; }

 private:
  ad::Parameter* add(const std::string& name, Shape shape, double std, double fill = 0.0);

  ModelConfig config_;
  std::vector<std::unique_ptr<ad::Parameter>> storage_;
  std::vector<ad::Parameter*> order_;
  ad::Parameter* tok_emb_ = nullptr;
  ad::Parameter* pos_emb_ = nullptr;
  std::vector<Layer> layers_;
  ad::Parameter* lnf_g_ = nullptr;
  ad::Parameter* lnf_b_ = nullptr;
  ad::Parameter* lm_w_ = nullptr;
  ad::Parameter* lm_b_ = nullptr;
  AttachHead head_;
};

/// LM cross-entropy + lambda * attachment cross-entropy.
/// With `mask_candidates`, the attachment softmax runs over the stack
/// candidates only (the distribution decoding uses); otherwise over every
/// causal slot.
LossParts model_loss(const ForwardOutputs& out, const LossTargets& targets, double lambda_attach,
                     bool mask_candidates = true);

/// Log-softmax of `n` logits. Entries with `mask[j] == false` (when a mask is
/// given) get -inf and are excluded from the normalizer.
void log_softmax(const double* logits, std::size_t n, const std::vector<bool>* mask, double* out);

/// Single-token forward pass with per-sequence key/value caches. Produces the
/// same bits as the batched forward for the same tokens and tapes.
class IncrementalModel {
 public:
  explicit IncrementalModel(const PushdownModel& model);

  struct Cache {
    int length = 0;
    std::vector<std::vector<double>> keys;    // per layer, length x d
    std::vector<std::vector<double>> values;  // per layer, length x d
    std::vector<double> attach_keys;          // length x hidden
    std::vector<double> hidden;               // final hidden of the last token
    std::vector<double> attach_query;         // attachment query of the last token
  };

  Cache empty_cache() const;

  /// Appends `token` at position `cache.length`. `tape_row` holds the tape
  /// after this token's attachment (length + 1 entries, unclamped).
  /// If `attention` is non-null it receives per layer, per head weights.
  void extend(Cache& cache, int token, const std::vector<int>& tape_row,
              std::vector<std::vector<double>>* attention = nullptr) const;

  /// Log-probabilities of the next token.
  void lm_log_probs(const Cache& cache, std::vector<double>& out) const;

  /// Log-probabilities of attaching `next_token` (slot cache.length is shift).
  /// `tape_row` is the current tape (cache.length entries), `mask` has
  /// cache.length + 1 entries.
  void attach_log_probs(const Cache& cache, int next_token, const std::vector<int>& tape_row,
                        const std::vector<bool>& mask, std::vector<double>& out) const;

  const PushdownModel& model() const { return model_; }

 private:
  const PushdownModel& model_;
  std::vector<double> dpre_;  // depth rows through the key MLP's first layer
  std::vector<double> w2t_;   // key MLP output weights, transposed
};

/// Checkpoint layout: "PDLM", u32 version, u32 count + (key, value) strings,
/// u32 vocab size + token strings, u32 tensor count, then per tensor: name,
/// u32 rank, u64 dims, f64 data.
void save_checkpoint(const std::filesystem::path& path, const PushdownModel& model, const Vocab& vocab);

struct LoadedModel {
  PushdownModel model;
  Vocab vocab;
};

/// Throws FormatError on bad magic, version or tensor mismatch.
LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace pdl
