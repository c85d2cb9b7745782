#include "kloc/trainer.hpp"

#include <algorithm>
#include <map>

#include "kloc/rng.hpp"

namespace kloc {

void TrainConfig::validate() const {
  require(epochs >= 0, Error::Kind::Training, "train config: negative epochs");
  require(batch_size >= 1, Error::Kind::Training, "train config: batch size must be positive");
  require(lr > 0.0f, Error::Kind::Training, "train config: learning rate must be positive");
  require(recall_target >= 0.0 && recall_target <= 1.0, Error::Kind::Training,
          "train config: recall target must lie in [0, 1]");
  require(optimizer == "adam" || optimizer == "sgd", Error::Kind::Training,
          "train config: unknown optimizer " + optimizer);
}

std::vector<PromptInstance> train_prompts(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                                          Perspective perspective) {
  std::vector<PromptInstance> out;
  for (int f = 0; f < static_cast<int>(w.facts.size()); ++f) {
    for (int t : split.of(w.facts[f].r, perspective).train) out.push_back(verbalize(w, tok, f, perspective, t));
  }
  return out;
}

std::vector<PromptInstance> heldout_prompts(const World& w, const Tokenizer& tok, const ProbeSplit& split,
                                            Perspective perspective) {
  std::vector<PromptInstance> out;
  for (int f = 0; f < static_cast<int>(w.facts.size()); ++f) {
    for (int t : split.of(w.facts[f].r, perspective).heldout) out.push_back(verbalize(w, tok, f, perspective, t));
  }
  return out;
}

RecallReport evaluate_recall(const Parameters& p, std::span<const PromptInstance> prompts) {
  RecallReport rep;
  std::vector<std::vector<int>> seqs;
  seqs.reserve(prompts.size());
  for (const PromptInstance& pi : prompts) seqs.push_back(pi.tokens);
  std::vector<int> preds = predict_final(p, seqs);

  int hit_e = 0, hit_r = 0;
  for (size_t i = 0; i < prompts.size(); ++i) {
    bool hit = preds[i] == prompts[i].answer;
    if (prompts[i].perspective == Perspective::Entity) {
      rep.n_entity += 1;
      hit_e += hit;
    } else {
      rep.n_relation += 1;
      hit_r += hit;
    }
  }
  if (rep.n_entity > 0) rep.acc_entity = static_cast<double>(hit_e) / rep.n_entity;
  if (rep.n_relation > 0) rep.acc_relation = static_cast<double>(hit_r) / rep.n_relation;
  return rep;
}

namespace {

struct Batch {
  std::vector<int> tokens;  // B*T
  std::vector<int> final_rows;
  std::vector<int> targets;
  int B = 0, T = 0;
};

std::vector<Batch> make_batches(const std::vector<PromptInstance>& prompts, const std::vector<int>& order,
                                int batch_size) {
  std::vector<Batch> batches;
  std::map<int, Batch> open;  // keyed by T
  auto flush = [&](Batch& b) {
    if (b.B > 0) batches.push_back(std::move(b));
    b = Batch{};
  };
  for (int id : order) {
    const PromptInstance& pi = prompts[id];
    int T = static_cast<int>(pi.tokens.size());
    Batch& b = open[T];
    b.T = T;
    b.tokens.insert(b.tokens.end(), pi.tokens.begin(), pi.tokens.end());
    b.final_rows.push_back(b.B * T + T - 1);
    b.targets.push_back(pi.answer);
    b.B += 1;
    if (b.B >= batch_size) flush(b);
  }
  for (auto& [T, b] : open) flush(b);
  return batches;
}

}  // namespace

TrainResult train(const World& world, const Tokenizer& tok, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  cfg.validate();
  require(model_cfg.V == tok.vocab_size(), Error::Kind::Training,
          "train: model vocabulary (" + std::to_string(model_cfg.V) + ") disagrees with world vocabulary (" +
              std::to_string(tok.vocab_size()) + ")");

  ProbeSplit split = split_probe_sets(world);
  std::vector<PromptInstance> prompts = train_prompts(world, tok, split, Perspective::Entity);
  {
    auto rel = train_prompts(world, tok, split, Perspective::Relation);
    prompts.insert(prompts.end(), rel.begin(), rel.end());
  }
  require(!prompts.empty(), Error::Kind::Training, "train: empty prompt set");

  TrainResult res;
  res.params = Parameters::init(model_cfg, cfg.seed);
  res.params.set_requires_grad(true);

  std::vector<Var> param_list;
  for (auto& [name, v] : res.params.named()) param_list.push_back(v);

  AdamState adam;
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  Pcg32 shuffle_rng(mix64(cfg.seed, fnv1a64("train-shuffle")));
  std::vector<int> order(prompts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  Parameters last_good = res.params.clone();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int steps = 0;
    try {
      for (const Batch& b : make_batches(prompts, order, cfg.batch_size)) {
        Tape tape;
        Var logits = forward_batch(res.params, b.tokens, b.B, b.T, &tape);
        Var answer_logits = select_rows(&tape, logits, b.final_rows);
        Var loss = cross_entropy(&tape, answer_logits, b.targets);
        zero_grads(param_list);
        tape.backward(loss);
        if (cfg.optimizer == "adam")
          adam_step(param_list, adam, adam_cfg);
        else
          sgd_step(param_list, cfg.lr);
        epoch_loss += loss->value.data[0];
        steps += 1;
      }
    } catch (const Error& e) {
      if (e.kind() == Error::Kind::Numeric) {
        res.params.set_requires_grad(false);
        throw TrainingDivergence("train: diverged at epoch " + std::to_string(epoch) + ": " + e.what(),
                                 std::move(last_good));
      }
      throw;
    }
    res.report.loss_curve.push_back(epoch_loss / std::max(steps, 1));
    res.epochs_run = epoch + 1;
    last_good = res.params.clone();

    RecallReport r = evaluate_recall(res.params, prompts);
    bool entity_ok = !r.acc_entity || *r.acc_entity >= cfg.recall_target;
    bool relation_ok = !r.acc_relation || *r.acc_relation >= cfg.recall_target;
    if (entity_ok && relation_ok) {
      res.target_met = true;
      break;
    }
  }

  res.params.set_requires_grad(false);
  RecallReport final_recall = evaluate_recall(res.params, prompts);
  final_recall.loss_curve = res.report.loss_curve;
  res.report = std::move(final_recall);
  res.target_met = (!res.report.acc_entity || *res.report.acc_entity >= cfg.recall_target) &&
                   (!res.report.acc_relation || *res.report.acc_relation >= cfg.recall_target);
  return res;
}

}  // namespace kloc
