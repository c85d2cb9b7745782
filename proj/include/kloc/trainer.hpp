#pragma once

#include <optional>

#include "kloc/model.hpp"
#include "kloc/world.hpp"

namespace kloc {

struct TrainConfig {
  int epochs = 150;
  int batch_size = 64;
  float lr = 1e-3f;
  std::string optimizer = "adam";  // "adam" | "sgd"
  uint64_t seed = 0;
  double recall_target = 0.95;

  void validate() const;
};

/// Top-1 accuracy of argmax p(y|prompt) against the stored object, split by
/// perspective. Accuracy is undefined (nullopt) on an empty prompt set.
struct RecallReport {
  std::optional<double> acc_entity;
  std::optional<double> acc_relation;
  int n_entity = 0;
  int n_relation = 0;
  std::vector<double> loss_curve;  // mean answer-position loss per epoch
};

struct TrainResult {
  Parameters params;
  RecallReport report;
  int epochs_run = 0;
  bool target_met = false;
};

/// Divergence carries the last finite-loss checkpoint.
class TrainingDivergence : public Error {
 public:
  TrainingDivergence(std::string msg, Parameters last_good)
      : Error(Error::Kind::Training, std::move(msg)), last_good_(std::move(last_good)) {}
  const Parameters& last_good() const { return last_good_; }

 private:
  Parameters last_good_;
};

/// Memorizes the world's facts: next-token loss at the answer position only,
/// over the train templates of both perspectives. Stops early once recall on
/// the train prompts meets the target. Deterministic given the seed.
TrainResult train(const World& world, const Tokenizer& tok, const ModelConfig& model_cfg,
                  const TrainConfig& cfg);

RecallReport evaluate_recall(const Parameters& p, std::span<const PromptInstance> prompts);

/// All (fact x train-template) prompt instances for one perspective.
std::vector<PromptInstance> train_prompts(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                                          Perspective perspective);
std::vector<PromptInstance> heldout_prompts(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                                            Perspective perspective);

/// Recall gate shared by tracing and editing: both refuse to run below 0.9.
inline constexpr double kRecallGate = 0.9;

}  // namespace kloc
