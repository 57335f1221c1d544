#pragma once

// Classification fine-tuning on PartA features and the W-way S-shot protocol.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/config.hpp"
#include "gpm/gpm_model.hpp"
#include "gpm/nn/optim.hpp"
#include "gpm/training.hpp"

namespace gpm {

/// Linear -> ReLU -> Dropout -> Linear over [CLS] concatenated with the
/// max-pool of the patch outputs.
template <class T>
struct ClassifierHead {
  nn::Linear<T> fc1, fc2;
  double dropout = 0.5;

  ClassifierHead() = default;
  ClassifierHead(nn::ParameterSet<T>& ps, std::size_t dim, std::size_t hidden, std::size_t classes, double rate, Rng& rng)
      : fc1(ps, "cls.fc1", 2 * dim, hidden, rng), fc2(ps, "cls.fc2", hidden, classes, rng), dropout(rate) {}

  /// part_a: (m + 1) x dim final PartA states. Returns 1 x classes.
  nn::Tensor<T> operator()(const nn::Tensor<T>& part_a, bool train, Rng* rng) const {
    using namespace nn;
    const std::size_t rows = part_a.rows();
    Tensor<T> feat = concat_cols<T>({slice_rows(part_a, 0, 1), max_pool_over_set(slice_rows(part_a, 1, rows - 1), rows - 1)});
    Tensor<T> h = relu(fc1(feat));
    if (train) {
      if (!rng) throw InvalidArgument("classifier: training mode needs a generator");
      h = nn::dropout(h, static_cast<T>(dropout), *rng, true);
    }
    return fc2(h);
  }
};

/// A private backbone copy plus a classification head.
template <class T>
class Classifier {
 public:
  Classifier(const GPMTransformer<T>& pretrained, std::size_t classes, const ClassifyConfig& cfg, std::uint64_t seed)
      : backbone_(std::make_unique<GPMTransformer<T>>(pretrained.config(), 0)), classes_(classes) {
    if (classes < 1) throw InvalidArgument("classifier: need at least one class");
    backbone_->parameters().copy_values_from(pretrained.parameters());
    Rng rng = make_rng(seed, {0xC1A55ULL});
    head_ = ClassifierHead<T>(head_params_, pretrained.config().dim, cfg.hidden, classes, cfg.dropout, rng);
  }

  GPMTransformer<T>& backbone() { return *backbone_; }
  const GPMTransformer<T>& backbone() const { return *backbone_; }
  nn::ParameterSet<T>& head_parameters() { return head_params_; }
  std::size_t classes() const { return classes_; }

  nn::Tensor<T> logits(const Encoded<T>& e, bool train, Rng* rng) const {
    GPMInput<T> in = backbone_->assemble_encoder(e.embeddings, e.patches.centers);
    GPMOutput<T> out = backbone_->forward(in, train, rng);
    return head_(out.part_a, train, rng);
  }

  std::size_t predict(const Encoded<T>& e) const {
    nn::NoGradGuard guard;
    nn::Tensor<T> lg = logits(e, false, nullptr);
    return argmax_rows<T>(lg.value(), 1, lg.cols())[0];
  }

 private:
  std::unique_ptr<GPMTransformer<T>> backbone_;
  nn::ParameterSet<T> head_params_;
  ClassifierHead<T> head_;
  std::size_t classes_;
};

template <class T>
double accuracy(const Classifier<T>& clf, const std::vector<const Encoded<T>*>& items, const std::vector<int>& labels) {
  if (items.empty()) return std::nan("");
  std::size_t ok = 0;
  for (std::size_t i = 0; i < items.size(); ++i) ok += clf.predict(*items[i]) == static_cast<std::size_t>(labels[i]);
  return static_cast<double>(ok) / static_cast<double>(items.size());
}

struct ClassifyResult {
  double initial_test_accuracy = std::nan("");
  double train_accuracy = std::nan("");
  double test_accuracy = std::nan("");
  std::uint64_t steps = 0;
  std::vector<double> losses;
};

namespace detail {
inline void check_labels(const std::vector<int>& labels, std::size_t classes) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw DataError("item " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(classes) + ")");
}
}  // namespace detail

/// Fine-tunes backbone and head with cross-entropy (the backbone stays fixed
/// when freeze_backbone is set). Reports test accuracy before and after.
template <class T>
ClassifyResult finetune_classifier(Classifier<T>& clf, const std::vector<const Encoded<T>*>& train,
                                   const std::vector<int>& train_labels, const std::vector<const Encoded<T>*>& test,
                                   const std::vector<int>& test_labels, const ClassifyConfig& cfg, const Seeds& seeds) {
  if (train.empty()) throw DataError("finetune_classifier: empty training set");
  if (train.size() != train_labels.size() || test.size() != test_labels.size())
    throw InvalidArgument("finetune_classifier: one label per item required");
  detail::check_labels(train_labels, clf.classes());
  detail::check_labels(test_labels, clf.classes());
  std::vector<nn::Parameter<T>*> params;
  for (auto& p : clf.head_parameters().all()) params.push_back(&p);
  if (!cfg.freeze_backbone)
    for (auto* p : clf.backbone().encoder_parameters()) params.push_back(p);
  nn::AdamW<T> opt(params, detail::hyper_of<T>(cfg.optim));

  ClassifyResult res;
  res.initial_test_accuracy = accuracy(clf, test, test_labels);
  for (std::uint64_t step = 0; step < cfg.steps; ++step) {
    opt.set_lr(lr_at(step, cfg.steps, cfg.optim.lr));
    for (auto* p : params) p->tensor.zero_grad();
    const auto batch = batch_indices(derive_seed(seeds.data, {0xC1A5ULL}), step, cfg.batch_size, train.size());
    const T inv = T(1) / static_cast<T>(batch.size());
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Rng rng = make_rng(seeds.sampling, {0xC1A6ULL, step, b});
      nn::Tensor<T> l = nn::cross_entropy(clf.logits(*train[batch[b]], true, &rng), {train_labels[batch[b]]});
      nn::scale(l, inv).backward();
      loss += l.item() / batch.size();
    }
    nn::clip_grad_norm(params, cfg.optim.clip);
    opt.step();
    res.losses.push_back(loss);
  }
  res.steps = cfg.steps;
  res.train_accuracy = accuracy(clf, train, train_labels);
  res.test_accuracy = accuracy(clf, test, test_labels);
  return res;
}

// ------------------------------------------------------------ few-shot

struct Episode {
  std::vector<int> classes;               // dataset labels of the W chosen classes
  std::vector<std::size_t> support;       // dataset indices, W*S
  std::vector<std::size_t> query;         // dataset indices, query_per_class*W
  std::vector<int> support_labels;        // episode-local labels 0..W-1
  std::vector<int> query_labels;
};

/// W classes, then S + query_per_class items per class without replacement;
/// the first S go to support.
inline Episode few_shot_episode(const std::vector<int>& labels, const std::vector<std::string>& class_names,
                                std::size_t way, std::size_t shot, std::uint64_t seed, std::size_t query_per_class = 20) {
  const std::size_t C = class_names.size();
  if (way < 1 || shot < 1) throw InvalidArgument("few_shot_episode: way and shot must be positive");
  if (way > C)
    throw DataError("few_shot_episode: " + std::to_string(way) + "-way episode needs that many classes, dataset has " +
                    std::to_string(C));
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < C) by_class[labels[i]].push_back(i);
  Rng rng = make_rng(seed, {0xE915ULL});
  std::vector<int> order(C);
  for (std::size_t c = 0; c < C; ++c) order[c] = static_cast<int>(c);
  for (std::size_t i = 0; i < way; ++i) std::swap(order[i], order[i + uniform_index(rng, C - i)]);
  Episode ep;
  ep.classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(way));
  for (std::size_t w = 0; w < way; ++w) {
    auto pool = by_class[ep.classes[w]];
    if (pool.size() < shot + query_per_class)
      throw DataError("few_shot_episode: class '" + class_names[ep.classes[w]] + "' has " + std::to_string(pool.size()) +
                      " items, needs " + std::to_string(shot + query_per_class));
    for (std::size_t i = 0; i < shot + query_per_class; ++i) {
      std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
      if (i < shot) {
        ep.support.push_back(pool[i]);
        ep.support_labels.push_back(static_cast<int>(w));
      } else {
        ep.query.push_back(pool[i]);
        ep.query_labels.push_back(static_cast<int>(w));
      }
    }
  }
  return ep;
}

struct FewShotReport {
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

inline FewShotReport summarize(std::vector<double> acc) {
  FewShotReport r;
  r.accuracies = std::move(acc);
  const double n = static_cast<double>(r.accuracies.size());
  for (double a : r.accuracies) r.mean += a / n;
  if (r.accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

/// `runs` independent episodes: fine-tune a fresh copy on the support set,
/// score it on the query set.
template <class T>
FewShotReport few_shot_eval(const GPMTransformer<T>& pretrained, const EncodedCorpus<T>& corpus,
                            const std::vector<std::string>& class_names, const FewShotConfig& fs,
                            const ClassifyConfig& cls, const Seeds& seeds) {
  if (fs.runs < 1) throw InvalidArgument("few_shot_eval: runs must be positive");
  std::vector<double> acc;
  for (std::size_t r = 0; r < fs.runs; ++r) {
    const Seeds run_seeds{derive_seed(seeds.data, {0xF5ULL, r}), derive_seed(seeds.model, {0xF5ULL, r}),
                          derive_seed(seeds.sampling, {0xF5ULL, r})};
    Episode ep = few_shot_episode(corpus.labels, class_names, fs.way, fs.shot, run_seeds.data, fs.query);
    std::vector<const Encoded<T>*> sup, qry;
    for (auto i : ep.support) sup.push_back(&corpus.items[i]);
    for (auto i : ep.query) qry.push_back(&corpus.items[i]);
    Classifier<T> clf(pretrained, fs.way, cls, run_seeds.model);
    acc.push_back(finetune_classifier(clf, sup, ep.support_labels, qry, ep.query_labels, cls, run_seeds).test_accuracy);
  }
  return summarize(std::move(acc));
}

}  // namespace gpm
