#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vsum/tensor.hpp"

namespace vsum {

// One labeled training instance: flattened feature vector plus a 0-indexed
// gold class.
struct TrainingExample {
  std::vector<double> features;
  int gold_class = 0;
};

// Classes counted as "high importance" when building the summary-class
// prototype: the top two score classes for K >= 3, the positive class for
// binary labels. 0-indexed.
std::vector<int> high_importance_classes(int num_classes);

struct ModelConfig {
  int input_dim = 36;
  int hidden_dim = 16;
  int depth = 4;                      // number of backbone blocks
  std::vector<int> exit_depths{2, 4};  // strictly increasing, last == depth
  int num_classes = 5;
  uint64_t seed = 1;

  int num_exits() const { return static_cast<int>(exit_depths.size()); }
  void validate() const;  // throws config_error naming the violated field
};

struct ExitPrediction {
  int head_index = 0;  // 1-based
  ad::Distribution probs;
  double confidence = 0.0;  // cosine against the stored prototype
  int blocks_traversed = 0; // exit depth + 1 head-equivalent
  int predicted_class() const { return probs.argmax(); }
};

// A block stack with exit heads at fixed depths and a stored prototype
// vector. Blocks are pre-norm residual MLP units; each head is one such
// block plus an affine classifier.
class ExitableModel {
 public:
  explicit ExitableModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  int depth() const { return config_.depth; }
  int num_exits() const { return config_.num_exits(); }
  int num_classes() const { return config_.num_classes; }

  // --- inference (plain doubles, no graph) ---
  ad::Distribution forward_full(std::span<const double> x) const;
  ExitPrediction forward_at_exit(std::span<const double> x, int head_index) const;  // 1-based

  // Incremental pieces so routing can share the block-stack prefix.
  std::vector<double> stem_forward(std::span<const double> x) const;
  void apply_block(int block_idx, std::vector<double>& hidden) const;  // 0-based
  std::vector<double> head_probs(int head_idx, const std::vector<double>& hidden) const;  // 0-based

  // --- training path (builds an autodiff graph) ---
  // X is [batch x input_dim]; returns logits [batch x num_classes] at the
  // given 1-based head (num_exits() for the final head).
  ad::Tensor logits_graph(const ad::Tensor& X, int head_index) const;

  // --- parameters ---
  std::vector<ad::Tensor> backbone_parameters() const;  // stem + blocks + final head
  std::vector<ad::Tensor> head_parameters(int head_index) const;  // 1-based
  std::vector<ad::Tensor> all_parameters() const;
  uint64_t checksum() const;
  uint64_t backbone_checksum() const;

  // --- prototype and lifecycle ---
  const std::vector<double>& prototype() const { return prototype_; }
  void set_prototype(std::vector<double> p, bool finalized);
  bool backbone_trained() const { return backbone_trained_; }
  void mark_backbone_trained();
  bool heads_calibrated() const { return heads_calibrated_; }
  void mark_heads_calibrated() { heads_calibrated_ = true; }
  bool prototype_finalized() const { return prototype_finalized_; }
  bool finalized() const {
    return backbone_trained_ && heads_calibrated_ && prototype_finalized_;
  }

  // --- persistence (bit-exact on parameters) ---
  void save(const std::string& path) const;
  static ExitableModel load(const std::string& path);

 private:
  struct Affine {
    ad::Tensor W, b;
  };
  struct Block {
    ad::Tensor ln_gain, ln_bias;
    Affine a1, a2;
  };
  struct Head {
    Block block;
    Affine classifier;
  };

  void init_params();
  void apply_block_impl(const Block& blk, std::vector<double>& hidden) const;
  ad::Tensor block_graph(const Block& blk, const ad::Tensor& h) const;
  void collect_named(std::vector<std::pair<std::string, ad::Tensor>>& out) const;

  ModelConfig config_;
  Affine stem_;
  std::vector<Block> blocks_;
  std::vector<Head> heads_;
  std::vector<double> prototype_;
  bool backbone_trained_ = false;
  bool heads_calibrated_ = false;
  bool prototype_finalized_ = false;
};

inline ExitableModel init_model(const ModelConfig& config) { return ExitableModel(config); }

// Streaming estimate of the prototype, updated per qualifying sample during
// training. decay 0.99 per sample.
class PrototypeEma {
 public:
  explicit PrototypeEma(int num_classes, double decay = 0.99)
      : value_(static_cast<size_t>(num_classes), 1.0 / num_classes), decay_(decay) {}
  void update(std::span<const double> probs);
  bool seen() const { return seen_; }
  std::vector<double> normalized() const;

 private:
  std::vector<double> value_;
  double decay_;
  bool seen_ = false;
};

// Batch form: prototype := L2-normalized mean of final-exit probability
// vectors over high-importance samples. Throws degenerate_prototype when no
// sample qualifies.
void finalize_prototype(ExitableModel& model, std::span<const TrainingExample> samples);

// Trains intermediate heads (1..N-1) by cross-entropy at their depths with the
// backbone frozen; the final head belongs to backbone training. epochs == 0 is
// a strict no-op.
void calibrate_exit_heads(ExitableModel& model, std::span<const TrainingExample> train,
                          int epochs, double learning_rate = 0.05, int batch_size = 64,
                          uint64_t seed = 7777);

}  // namespace vsum
