#pragma once

// Stage-1 (dVAE) and stage-2 (GPM) training loops. Every random draw is
// derived from (seed, step, item), so a run resumed from a checkpoint
// continues exactly as the uninterrupted run would.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/common/random.hpp"
#include "gpm/config.hpp"
#include "gpm/data_io.hpp"
#include "gpm/dvae.hpp"
#include "gpm/gpm_model.hpp"
#include "gpm/nn/checkpoint.hpp"
#include "gpm/nn/optim.hpp"
#include "gpm/schedules.hpp"

namespace gpm {

struct TrainLogRecord {
  std::uint64_t step = 0;
  double lr = 0, temperature = 0, kl_weight = 0;
  double loss = 0, chamfer = 0, kl = 0, ae = 0, ar = 0;
  double seconds = 0;
};

inline const char* kTrainLogHeader = "step\tlr\ttemperature\tkl_weight\tloss\tchamfer\tkl\tae\tar\tseconds";

inline void write_log_line(std::ostream& os, const TrainLogRecord& r) {
  os << r.step << '\t' << std::setprecision(9) << r.lr << '\t' << r.temperature << '\t' << r.kl_weight << '\t' << r.loss
     << '\t' << r.chamfer << '\t' << r.kl << '\t' << r.ae << '\t' << r.ar << '\t' << std::setprecision(4) << r.seconds
     << '\n';
}

struct RunOptions {
  std::string out_dir;          // empty: no files written
  std::string resume_from;      // checkpoint carrying optimizer state
  std::uint64_t stop_after = 0; // stop once this many total steps are done (0: run to the end)
  std::size_t log_every = 1;
  std::ostream* progress = nullptr;
};

/// Per-cloud FPS seed shared by training, evaluation and tokenization.
inline std::uint64_t cloud_patch_seed(std::uint64_t data_seed, std::size_t item) {
  return derive_seed(data_seed, {0xFA7C4ULL, item});
}

/// Batch membership for one step: without replacement when the batch fits.
inline std::vector<std::size_t> batch_indices(std::uint64_t data_seed, std::uint64_t step, std::size_t batch,
                                              std::size_t n) {
  if (n == 0) throw DataError("training dataset is empty");
  Rng rng = make_rng(data_seed, {0xBA7C4ULL, step});
  std::vector<std::size_t> out;
  if (batch <= n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < batch; ++i) {
      std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
      out.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < batch; ++i) out.push_back(uniform_index(rng, n));
  }
  return out;
}

namespace detail {

template <class T>
nn::AdamWHyper hyper_of(const OptimConfig& o) {
  nn::AdamWHyper h;
  h.lr = o.lr.base;
  h.beta1 = o.beta1;
  h.beta2 = o.beta2;
  h.weight_decay = o.weight_decay;
  return h;
}

class LogSink {
 public:
  LogSink(const std::string& path, bool append) {
    if (path.empty()) return;
    const bool fresh = !append || !std::filesystem::exists(path);
    os_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!os_) throw IoError("cannot open log: " + path);
    if (fresh) os_ << kTrainLogHeader << '\n';
  }
  void write(const TrainLogRecord& r) {
    if (os_.is_open()) {
      write_log_line(os_, r);
      os_.flush();
    }
  }

 private:
  std::ofstream os_;
};

template <class T>
void save_training_checkpoint(const std::string& path, const nn::ParameterSet<T>& ps, const nn::AdamW<T>& opt) {
  std::vector<std::pair<std::string, nn::CheckpointRecord>> recs;
  nn::append_parameters(recs, ps);
  nn::append_optimizer(recs, opt);
  nn::write_checkpoint(path, recs);
}

template <class T>
std::uint64_t resume(const std::string& path, nn::ParameterSet<T>& ps, nn::AdamW<T>& opt) {
  const nn::Checkpoint ck = nn::read_checkpoint(path);
  nn::load_parameters(ck, ps);
  if (!nn::has_optimizer_state(ck)) throw DataError("checkpoint has no optimizer state to resume from: " + path);
  nn::load_optimizer(ck, opt);
  return opt.state().step;
}

inline std::string join(const std::string& dir, const std::string& file) {
  return dir.empty() ? std::string() : (std::filesystem::path(dir) / file).string();
}

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// ------------------------------------------------------------ stage 1

struct DVAETrainResult {
  std::vector<TrainLogRecord> log;
  double initial_eval_chamfer = std::nan("");
  double final_eval_chamfer = std::nan("");
  std::uint64_t final_step = 0;
  std::string checkpoint;
};

/// Mean hard-path reconstruction Chamfer over the dataset.
template <class T>
double dvae_eval_chamfer(const DVAE<T>& model, const Dataset& ds, std::uint64_t data_seed) {
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) sum += model.eval_chamfer(ds.items[i].cloud, cloud_patch_seed(data_seed, i));
  return sum / static_cast<double>(ds.size());
}

template <class T>
DVAETrainResult train_dvae(DVAE<T>& model, const TrainConfig& tc, const Dataset& ds, const Seeds& seeds,
                           const RunOptions& opts = {}) {
  if (ds.size() == 0) throw DataError("train_dvae: dataset is empty");
  auto opt = nn::AdamW<T>::over(model.parameters(), detail::hyper_of<T>(tc.optim));
  std::uint64_t step = 0;
  if (!opts.resume_from.empty()) step = detail::resume(opts.resume_from, model.parameters(), opt);
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  detail::LogSink sink(detail::join(opts.out_dir, "dvae_log.tsv"), step > 0);

  DVAETrainResult res;
  if (step == 0) res.initial_eval_chamfer = dvae_eval_chamfer(model, ds, seeds.data);
  const std::uint64_t end = opts.stop_after ? std::min(opts.stop_after, tc.total_steps) : tc.total_steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (; step < end; ++step) {
    TrainLogRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, tc.total_steps, tc.optim.lr);
    rec.temperature = temperature_at(step, tc.tau);
    rec.kl_weight = kl_weight_at(step, tc.kl);
    opt.set_lr(rec.lr);
    model.parameters().zero_grad();
    const auto batch = batch_indices(seeds.data, step, tc.batch_size, ds.size());
    const T inv = T(1) / static_cast<T>(batch.size());
    try {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t item = batch[b];
        Rng noise = make_rng(seeds.sampling, {0x6B3E1ULL, step, b});
        DVAEStep<T> s = model.train_step(ds.items[item].cloud, cloud_patch_seed(seeds.data, item),
                                         static_cast<T>(rec.temperature), rec.kl_weight, noise);
        nn::scale(s.loss.total, inv).backward();
        rec.loss += s.loss.total.item() / batch.size();
        rec.chamfer += s.loss.chamfer.item() / batch.size();
        rec.kl += s.loss.kl.item() / batch.size();
      }
      nn::clip_grad_norm(opt.params(), tc.optim.clip);
      opt.step();
    } catch (const NumericFailure& e) {
      throw NumericFailure("dVAE step " + std::to_string(step) + ": " + e.what());
    }
    rec.seconds = detail::elapsed(t0);
    res.log.push_back(rec);
    sink.write(rec);
    if (opts.progress && opts.log_every && (step % opts.log_every == 0 || step + 1 == end))
      *opts.progress << "dvae step " << step << " loss " << rec.loss << " chamfer " << rec.chamfer << '\n';
    if (tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0 && step + 1 < end && !opts.out_dir.empty())
      detail::save_training_checkpoint(detail::join(opts.out_dir, "dvae_step" + std::to_string(step + 1) + ".ckpt"),
                                       model.parameters(), opt);
  }
  res.final_step = step;
  model.mark_ready();
  res.final_eval_chamfer = dvae_eval_chamfer(model, ds, seeds.data);
  if (!opts.out_dir.empty()) {
    res.checkpoint = detail::join(opts.out_dir, "dvae.ckpt");
    detail::save_training_checkpoint(res.checkpoint, model.parameters(), opt);
  }
  return res;
}

/// Loads dVAE weights (optimizer records, if any, are ignored) and marks
/// the model ready.
template <class T>
void load_dvae(DVAE<T>& model, const std::string& path) {
  if (path.empty()) throw NotReady("no dVAE checkpoint configured (set dvae.checkpoint)");
  nn::load_parameters(nn::read_checkpoint(path), model.parameters());
  model.mark_ready();
}

template <class T>
void load_gpm(GPMTransformer<T>& model, const std::string& path) {
  if (path.empty()) throw NotReady("no GPM checkpoint configured (set gpm.checkpoint)");
  nn::load_parameters(nn::read_checkpoint(path), model.parameters());
}

// ------------------------------------------------------------ stage 2

/// Frozen-tokenizer encodings of a whole dataset, computed once.
template <class T>
struct EncodedCorpus {
  std::vector<Encoded<T>> items;
  std::vector<int> labels;
};

template <class T>
EncodedCorpus<T> encode_dataset(const DVAE<T>& dvae, const Dataset& ds, std::uint64_t data_seed) {
  EncodedCorpus<T> c;
  c.items.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    c.items.push_back(dvae.encode(ds.items[i].cloud, cloud_patch_seed(data_seed, i)));
    c.labels.push_back(ds.items[i].label);
  }
  return c;
}

/// Fixed evaluation mask for item i.
inline std::vector<std::size_t> eval_mask(const std::vector<Point3>& centers, const GPMConfig& cfg,
                                          std::uint64_t sampling_seed, std::size_t item) {
  Rng rng = make_rng(sampling_seed, {0xE7A1ULL, item});
  return select_mask_region(centers, cfg.mask_ratio_min, cfg.mask_ratio_max, rng);
}

struct GPMEval {
  double total = 0, ae = 0, ar = 0;
};

/// Evaluation-mode losses over the corpus with fixed per-item masks.
template <class T>
GPMEval gpm_eval_loss(const GPMTransformer<T>& model, const EncodedCorpus<T>& corpus, const nn::Tensor<T>& codebook,
                      std::uint64_t sampling_seed, bool b_first = false) {
  nn::NoGradGuard guard;
  GPMEval ev;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    const auto& e = corpus.items[i];
    auto mask = eval_mask(e.patches.centers, model.config(), sampling_seed, i);
    GPMInput<T> in = model.assemble(e.embeddings, e.patches.centers, e.tokens, mask, codebook);
    if (b_first) in = order_swap(std::move(in));
    auto l = gpm_losses(model, in, model.forward(in, false, nullptr));
    ev.total += l.total.item();
    ev.ae += l.ae.item();
    ev.ar += l.ar.item();
  }
  const double n = static_cast<double>(corpus.items.size());
  ev.total /= n;
  ev.ae /= n;
  ev.ar /= n;
  return ev;
}

struct GPMTrainResult {
  std::vector<TrainLogRecord> log;
  GPMEval initial_eval{std::nan(""), std::nan(""), std::nan("")};
  GPMEval final_eval;
  std::uint64_t tokenizer_checksum_before = 0;
  std::uint64_t tokenizer_checksum_after = 0;
  std::uint64_t final_step = 0;
  std::string checkpoint;
};

template <class T>
GPMTrainResult train_gpm(GPMTransformer<T>& model, const DVAE<T>& dvae, const TrainConfig& tc,
                         const EncodedCorpus<T>& corpus, const Seeds& seeds, const RunOptions& opts = {},
                         bool b_first = false) {
  if (!dvae.ready()) throw NotReady("train_gpm: the dVAE checkpoint is not loaded");
  if (corpus.items.empty()) throw DataError("train_gpm: dataset is empty");
  GPMTrainResult res;
  res.tokenizer_checksum_before = dvae.tokenizer_checksum();
  nn::AdamW<T> opt(model.trainable(model.config().w_ae, model.config().w_ar), detail::hyper_of<T>(tc.optim));
  std::uint64_t step = 0;
  if (!opts.resume_from.empty()) step = detail::resume(opts.resume_from, model.parameters(), opt);
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  detail::LogSink sink(detail::join(opts.out_dir, "gpm_log.tsv"), step > 0);
  if (step == 0) res.initial_eval = gpm_eval_loss(model, corpus, dvae.codebook(), seeds.sampling, b_first);

  const auto& cfg = model.config();
  const std::uint64_t end = opts.stop_after ? std::min(opts.stop_after, tc.total_steps) : tc.total_steps;
  const auto t0 = std::chrono::steady_clock::now();
  for (; step < end; ++step) {
    TrainLogRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, tc.total_steps, tc.optim.lr);
    opt.set_lr(rec.lr);
    model.parameters().zero_grad();
    const auto batch = batch_indices(seeds.data, step, tc.batch_size, corpus.items.size());
    const T inv = T(1) / static_cast<T>(batch.size());
    try {
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& e = corpus.items[batch[b]];
        Rng rng = make_rng(seeds.sampling, {0x3A5CULL, step, b});
        auto mask = select_mask_region(e.patches.centers, cfg.mask_ratio_min, cfg.mask_ratio_max, rng);
        GPMInput<T> in = model.assemble(e.embeddings, e.patches.centers, e.tokens, mask, dvae.codebook());
        if (b_first) in = order_swap(std::move(in));
        auto l = gpm_losses(model, in, model.forward(in, true, &rng));
        nn::scale(l.total, inv).backward();
        rec.loss += l.total.item() / batch.size();
        rec.ae += l.ae.item() / batch.size();
        rec.ar += l.ar.item() / batch.size();
      }
      nn::clip_grad_norm(opt.params(), tc.optim.clip);
      opt.step();
    } catch (const NumericFailure& e) {
      throw NumericFailure("GPM step " + std::to_string(step) + ": " + e.what());
    }
    rec.seconds = detail::elapsed(t0);
    res.log.push_back(rec);
    sink.write(rec);
    if (opts.progress && opts.log_every && (step % opts.log_every == 0 || step + 1 == end))
      *opts.progress << "gpm step " << step << " loss " << rec.loss << " ae " << rec.ae << " ar " << rec.ar << '\n';
    if (tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0 && step + 1 < end && !opts.out_dir.empty())
      detail::save_training_checkpoint(detail::join(opts.out_dir, "gpm_step" + std::to_string(step + 1) + ".ckpt"),
                                       model.parameters(), opt);
  }
  res.final_step = step;
  res.final_eval = gpm_eval_loss(model, corpus, dvae.codebook(), seeds.sampling, b_first);
  res.tokenizer_checksum_after = dvae.tokenizer_checksum();
  if (!opts.out_dir.empty()) {
    res.checkpoint = detail::join(opts.out_dir, "gpm.ckpt");
    detail::save_training_checkpoint(res.checkpoint, model.parameters(), opt);
  }
  return res;
}

}  // namespace gpm
