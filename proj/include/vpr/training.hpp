#pragma once

// Metric-learning training: P x K batch sampling, Adam, a model wrapper that
// couples an optional residual token backbone with one aggregation head, and
// the two-stage schedule (backbone + NetVLAD first, then the projection only).

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vpr/backbone.hpp"
#include "vpr/featureio.hpp"
#include "vpr/loss.hpp"

namespace vpr::train {

struct BatchSpec {
  std::size_t places_per_batch = 16;  // P_b
  std::size_t images_per_place = 4;   // K_b
  std::uint64_t seed = 0;

  std::size_t batch_size() const { return places_per_batch * images_per_place; }
  void validate() const;
};

struct MiniBatch {
  std::vector<std::size_t> items;      // indices into the training set
  std::vector<std::int64_t> classes;   // class of each item
};

/// Each epoch visits every eligible class once with K_b images drawn without
/// replacement, in a freshly shuffled class order; the trailing partial batch
/// is dropped. Classes with fewer than K_b images are skipped with a warning.
class BatchSampler {
 public:
  BatchSampler(const std::vector<std::int64_t>& class_of_item, const BatchSpec& spec);

  std::vector<MiniBatch> epoch(std::size_t epoch_index) const;
  std::size_t eligible_classes() const { return classes_.size(); }
  std::size_t skipped_classes() const { return skipped_; }

 private:
  BatchSpec spec_;
  std::vector<std::int64_t> classes_;             // eligible class ids, ascending
  std::vector<std::vector<std::size_t>> members_;  // items per eligible class
  std::size_t skipped_ = 0;
};

struct TrainConfig {
  double lr = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs_stage1 = 10;
  std::optional<int> epochs_stage2;  // defaults to half of stage 1 (at least 1)
  std::size_t warmup_steps = 0;      // linear ramp; 0 disables
  std::string resolution = "224";
  MsLossConfig loss;
  int threads = 1;

  void validate() const;
  int stage2_epochs() const;
  double lr_at(std::size_t step) const;
};

enum class Head { Gem, G2m, NetVlad, Nvl };

const char* to_string(Head h);
Head parse_head(const std::string& s);

struct ModelSpec {
  Head head = Head::G2m;
  std::size_t channels = 768;
  std::size_t backbone_depth = 0;  // residual token blocks applied to input maps
  std::size_t trainable_tail = 4;
  std::size_t g2m_rank = 64;
  std::size_t out_dim = 768;   // GeM / G2M descriptor size
  std::size_t clusters = 64;   // NetVLAD K
  std::size_t proj_dim = 128;  // NVL C'

  void validate() const;
  std::string to_json() const;
  static ModelSpec from_json(const std::string& text);
};

using HeadParams = std::variant<GemFcParams, G2mParams, NetVladParams, NvlParams>;

struct Model {
  ModelSpec spec;
  std::optional<ToyBackbone> backbone;
  HeadParams head;

  /// NetVLAD centres come from k-means over location vectors of `sample`
  /// (after the initial backbone); other heads ignore it.
  static Model init(const ModelSpec& spec, std::span<const FeatureMap> sample, std::uint64_t seed);

  NamedTensors tensors();
  ConstNamedTensors tensors() const;
  std::size_t out_dim() const;
  std::size_t parameter_count() const;

  FeatureMap features(const FeatureMap& input) const;
  Descriptor describe(const FeatureMap& input) const;

  io::Checkpoint to_checkpoint(io::Stage stage) const;
  static Model from_checkpoint(const io::Checkpoint& ckpt);
};

/// Zero-filled model with the same structure, used for gradients.
Model zeros_like(const Model& m);

/// Names of tensors updated in the given stage. Stage 1 covers the trainable
/// backbone tail and every head tensor; stage 2 covers the NVL projection only.
std::vector<std::string> trainable_set(const Model& m, io::Stage stage);
std::size_t trainable_count(const Model& m, io::Stage stage);

std::vector<Descriptor> describe_all(const Model& m, std::span<const FeatureMap> inputs, int threads = 1);

/// Adam with bias correction and no weight decay.
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates the tensors of `params` whose names appear in `trainable`;
  /// `grads` must list the same names in the same order.
  void step(const NamedTensors& params, const NamedTensors& grads, const std::vector<std::string>& trainable,
            double lr);

 private:
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::pair<std::string, std::pair<Tensor, Tensor>>> moments_;
};

struct TrainSet {
  std::vector<FeatureMap> maps;
  std::vector<std::int64_t> classes;

  void validate() const;
};

struct TrainResult {
  Model model;
  io::Stage stage = io::Stage::Stage1;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::size_t steps = 0;
  std::size_t trainable_params = 0;
  bool aborted = false;  // non-finite loss; `model` holds the last good parameters
  std::string abort_reason;

  io::Checkpoint checkpoint() const { return model.to_checkpoint(stage); }
};

/// Stage 1 (or one-shot) training of backbone tail plus head. `log` receives
/// one JSON object per step.
TrainResult train_stage1(const TrainSet& data, Model model, const TrainConfig& cfg, const BatchSpec& spec,
                         std::ostream* log = nullptr);

/// Stage 2: loads a stage-1 NetVLAD checkpoint, attaches a C x C' projection
/// and trains only that projection on the projected descriptors. The frozen
/// backbone and NetVLAD outputs are computed once up front.
TrainResult train_stage2_ft2(const io::Checkpoint& stage1, const TrainSet& data, std::size_t proj_dim,
                             const TrainConfig& cfg, const BatchSpec& spec, std::ostream* log = nullptr);

}  // namespace vpr::train
