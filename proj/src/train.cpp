#include "edh/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "edh/rng.hpp"

namespace edh {

TrainConfig TrainConfig::moon_defaults() {
  TrainConfig cfg;
  cfg.profile = Profile::moon;
  cfg.lr = 1e-3;
  cfg.weights = {3.0, 3.0, 1.0};
  cfg.epochs = 50;
  cfg.batch_size = 200;
  cfg.n_g = 5;
  cfg.n_c = 5;
  cfg.generator_updates = 3;
  return cfg;
}

TrainConfig TrainConfig::signal_defaults() {
  TrainConfig cfg;
  cfg.profile = Profile::signal;
  cfg.lr = 2e-4;
  cfg.weights = {5.0, 5.0, 0.01};
  cfg.epochs = 100;
  cfg.batch_size = 256;
  cfg.n_g = 5;
  cfg.n_c = 5;
  cfg.generator_updates = 4;
  return cfg;
}

GeneratorConfig generator_config_for(TrainConfig::Profile profile,
                                     int input_dim) {
  GeneratorConfig gcfg;
  gcfg.input_dim = input_dim;
  if (profile == TrainConfig::Profile::moon) {
    gcfg.kind = GeneratorConfig::Kind::moon_ann;
    gcfg.feature_length = 32;
  } else {
    gcfg.kind = GeneratorConfig::Kind::signal_dense;
    gcfg.feature_length = 256;
  }
  return gcfg;
}

ClassifierConfig classifier_config_for(TrainConfig::Profile profile,
                                       int n_classes) {
  ClassifierConfig ccfg;
  ccfg.input_dim = profile == TrainConfig::Profile::moon ? 32 : 256;
  ccfg.hidden_width = 64;
  ccfg.n_classes = n_classes;
  return ccfg;
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return Rng::splitmix(seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
}

Tensor concat_batch(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows + b.rows, a.cols);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.v.size());
  return tensor_from_matrix(out);
}

/// Generators always process the concatenated source+target batch (their
/// batchnorm statistics are shared across both domains); the classifiers of
/// one step run only on the rows that step's losses consume.
std::vector<Tensor> generator_features(EnsembleModel& model, const Tensor& x,
                                       BnMode gen_mode, bool detach) {
  std::vector<Tensor> features;
  features.reserve(model.n_g);
  for (int i = 0; i < model.n_g; ++i) {
    Tensor f = model.generators[i].forward(x, gen_mode);
    features.push_back(detach ? f.detach() : f);
  }
  return features;
}

std::vector<std::vector<Tensor>> classifier_outputs(
    EnsembleModel& model, const std::vector<Tensor>& cls_inputs,
    BnMode cls_mode) {
  std::vector<std::vector<Tensor>> out(model.n_g);
  for (int i = 0; i < model.n_g; ++i) {
    out[i].reserve(model.n_c);
    for (int j = 0; j < model.n_c; ++j)
      out[i].push_back(
          model.classifiers[i * model.n_c + j].scores(cls_inputs[i], cls_mode));
  }
  return out;
}

void zero_all(EnsembleModel& model) {
  for (Tensor& t : model.parameters()) t.zero_grad();
}

/// Temporarily drops requires_grad on a parameter set (frozen halves skip
/// their weight-gradient work).
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Tensor> params) : params_(std::move(params)) {
    for (Tensor& t : params_) t.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (Tensor& t : params_) t.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor> params_;
};

}  // namespace

StepReport step_A(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_g, Adam& opt_c) {
  const int ns = batch.source_x.rows;
  Tensor x = concat_batch(batch.source_x, batch.target_x);
  std::vector<Tensor> features =
      generator_features(model, x, BnMode::train, false);
  // Only the source rows feed the supervised loss.
  std::vector<Tensor> cls_inputs;
  cls_inputs.reserve(features.size());
  for (const Tensor& f : features) cls_inputs.push_back(slice_rows(f, 0, ns));
  std::vector<std::vector<Tensor>> logits =
      classifier_outputs(model, cls_inputs, BnMode::train);

  Tensor l_s = source_loss(logits, batch.source_y);
  Tensor l_dg = feature_discrepancy(features);
  Tensor objective = add(l_s, scale(l_dg, -w.xi_g));

  zero_all(model);
  backward(objective);
  opt_g.step();
  opt_c.step();

  StepReport report;
  report.l_s = l_s.value();
  report.l_dg = l_dg.value();
  return report;
}

StepReport step_B(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_c) {
  const int ns = batch.source_x.rows, nt = batch.target_x.rows;
  Tensor x = concat_batch(batch.source_x, batch.target_x);
  // Generators run with frozen statistics and detached outputs: nothing of
  // theirs may change and no gradient work is owed to them. Classifiers see
  // the full concatenated batch (both domains share their batch statistics
  // here) and the per-domain losses slice the outputs.
  std::vector<Tensor> features =
      generator_features(model, x, BnMode::train_frozen, true);
  std::vector<std::vector<Tensor>> logits =
      classifier_outputs(model, features, BnMode::train);

  std::vector<std::vector<Tensor>> source_logits(model.n_g);
  std::vector<std::vector<Tensor>> target_probs(model.n_g);
  for (int i = 0; i < model.n_g; ++i)
    for (const Tensor& l : logits[i]) {
      source_logits[i].push_back(slice_rows(l, 0, ns));
      target_probs[i].push_back(softmax_rows(slice_rows(l, ns, ns + nt)));
    }

  Tensor l_s = source_loss(source_logits, batch.source_y);
  Tensor l_dc = classifier_discrepancy(target_probs);
  Tensor l_e = entropy_loss(target_probs);
  Tensor objective = add(add(l_s, scale(l_dc, -w.xi_c)), scale(l_e, w.xi_e));

  zero_all(model);
  backward(objective);
  opt_c.step();

  StepReport report;
  report.l_s = l_s.value();
  report.l_dc = l_dc.value();
  report.l_e = l_e.value();
  return report;
}

StepReport step_C(EnsembleModel& model, const BatchPair& batch,
                  const LossWeights& w, Adam& opt_g) {
  const int ns = batch.source_x.rows, nt = batch.target_x.rows;
  Tensor x = concat_batch(batch.source_x, batch.target_x);
  FreezeGuard freeze(model.classifier_parameters());
  std::vector<Tensor> features =
      generator_features(model, x, BnMode::train, false);
  // Classifier losses in this step are target-only.
  std::vector<Tensor> cls_inputs;
  cls_inputs.reserve(features.size());
  for (const Tensor& f : features)
    cls_inputs.push_back(slice_rows(f, ns, ns + nt));
  std::vector<std::vector<Tensor>> logits =
      classifier_outputs(model, cls_inputs, BnMode::train_frozen);
  std::vector<std::vector<Tensor>> target_probs(model.n_g);
  for (int i = 0; i < model.n_g; ++i)
    for (const Tensor& l : logits[i])
      target_probs[i].push_back(softmax_rows(l));

  Tensor l_dc = classifier_discrepancy(target_probs);
  Tensor l_dg = feature_discrepancy(features);
  Tensor l_e = entropy_loss(target_probs);
  Tensor objective = add(add(l_dc, scale(l_dg, -1.0)), scale(l_e, w.xi_e));

  zero_all(model);
  backward(objective);
  opt_g.step();

  StepReport report;
  report.l_dc = l_dc.value();
  report.l_dg = l_dg.value();
  report.l_e = l_e.value();
  return report;
}

// ---- data cycling -----------------------------------------------------------

namespace {

/// Hands out mini-batches of row indices, reshuffling on every wrap so the
/// shorter domain cycles with fresh order.
class IndexCycler {
 public:
  IndexCycler(int n, Rng rng) : rng_(rng), idx_(n) {
    for (int i = 0; i < n; ++i) idx_[i] = i;
    rng_.shuffle(idx_);
  }
  std::vector<int> next(int k) {
    std::vector<int> out;
    out.reserve(k);
    while (k-- > 0) {
      if (pos_ == idx_.size()) {
        rng_.shuffle(idx_);
        pos_ = 0;
      }
      out.push_back(idx_[pos_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::vector<int> idx_;
  std::size_t pos_ = 0;
};

Matrix gather_rows(const Matrix& src, const std::vector<int>& rows) {
  Matrix out(static_cast<int>(rows.size()), src.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.row(rows[i]), src.cols, out.row(static_cast<int>(i)));
  return out;
}

double accuracy_on(EnsembleModel& model, const DomainDataset& ds) {
  Prediction pred = ensemble_predict(model, ds.features, BnMode::eval);
  const std::vector<int>& y = ds.eval_labels();
  int correct = 0;
  for (int i = 0; i < ds.size(); ++i)
    if (pred.voted[i] == y[i]) ++correct;
  return static_cast<double>(correct) / ds.size();
}

void fill_eval_columns(EpochRow& row, EnsembleModel& model,
                       const EvalSets& eval) {
  if (eval.source_test) row.source_test_acc = accuracy_on(model, *eval.source_test);
  if (eval.target_test) row.target_test_acc = accuracy_on(model, *eval.target_test);
}

}  // namespace

EdhTrainResult train_edh(const DomainDataset& source,
                         const DomainDataset& target, const TrainConfig& cfg,
                         const EvalSets& eval) {
  if (source.size() == 0 || target.size() == 0)
    throw std::invalid_argument("train_edh: empty dataset");
  const std::vector<int>& source_y = source.train_labels();

  GeneratorConfig gcfg = generator_config_for(cfg.profile, source.dim());
  ClassifierConfig ccfg = classifier_config_for(cfg.profile, source.n_classes);
  EdhTrainResult result{
      build_ensemble(gcfg, ccfg, cfg.n_g, cfg.n_c, derive_seed(cfg.seed, 0)),
      {}};
  EnsembleModel& model = result.model;

  AdamConfig adam{cfg.lr};
  Adam opt_g(model.generator_parameters(), adam);
  Adam opt_c(model.classifier_parameters(), adam);

  IndexCycler source_cycler(source.size(), Rng(derive_seed(cfg.seed, 1)));
  IndexCycler target_cycler(target.size(), Rng(derive_seed(cfg.seed, 2)));

  const int iters_per_epoch = static_cast<int>(
      (std::max(source.size(), target.size()) + cfg.batch_size - 1) /
      cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    for (int it = 0; it < iters_per_epoch; ++it) {
      BatchPair batch;
      std::vector<int> src_rows = source_cycler.next(cfg.batch_size);
      std::vector<int> tgt_rows = target_cycler.next(cfg.batch_size);
      batch.source_x = gather_rows(source.features, src_rows);
      batch.source_y.reserve(src_rows.size());
      for (int r : src_rows) batch.source_y.push_back(source_y[r]);
      batch.target_x = gather_rows(target.features, tgt_rows);

      StepReport ra = step_A(model, batch, cfg.weights, opt_g, opt_c);
      StepReport rb = step_B(model, batch, cfg.weights, opt_c);
      for (int g = 0; g < cfg.generator_updates; ++g)
        step_C(model, batch, cfg.weights, opt_g);

      row.l_s += ra.l_s;
      row.l_dg += ra.l_dg;
      row.l_dc += rb.l_dc;
      row.l_e += rb.l_e;
    }
    row.l_s /= iters_per_epoch;
    row.l_dg /= iters_per_epoch;
    row.l_dc /= iters_per_epoch;
    row.l_e /= iters_per_epoch;
    fill_eval_columns(row, model, eval);
    result.curve.rows.push_back(row);
  }
  return result;
}

DistillResult distill(EnsembleModel& teacher, const DomainDataset& target,
                      const TrainConfig& cfg, const EvalSets& eval) {
  if (target.size() == 0)
    throw std::invalid_argument("distill: empty target dataset");
  Matrix soft_labels = pseudo_labels(teacher, target.features);

  DistillResult result{
      build_student(teacher.gcfg, teacher.ccfg, derive_seed(cfg.seed, 3)), {}};
  StudentModel& student = result.student;

  AdamConfig adam{cfg.lr};
  Adam opt(student.parameters(), adam);
  IndexCycler cycler(target.size(), Rng(derive_seed(cfg.seed, 4)));
  const int iters_per_epoch = static_cast<int>(
      (target.size() + cfg.batch_size - 1) / cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    for (int it = 0; it < iters_per_epoch; ++it) {
      std::vector<int> rows = cycler.next(cfg.batch_size);
      Tensor x = tensor_from_matrix(gather_rows(target.features, rows));
      Matrix teacher_rows(static_cast<int>(rows.size()), soft_labels.cols);
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(soft_labels.row(rows[i]), soft_labels.cols,
                    teacher_rows.row(static_cast<int>(i)));

      Tensor feat = student.generator().forward(x, BnMode::train);
      Tensor probs = softmax_rows(student.classifier().scores(feat, BnMode::train));
      Tensor loss = distillation_loss(probs, teacher_rows);

      for (Tensor& t : student.parameters()) t.zero_grad();
      backward(loss);
      opt.step();
      row.l_s += loss.value();
    }
    row.l_s /= iters_per_epoch;
    fill_eval_columns(row, student.net, eval);
    result.curve.rows.push_back(row);
  }
  return result;
}

BaselineKind baseline_kind_from_string(const std::string& name) {
  if (name == "source-only") return BaselineKind::source_only;
  if (name == "mcd") return BaselineKind::mcd;
  throw std::invalid_argument("unknown baseline kind: " + name);
}

EdhTrainResult train_baseline(BaselineKind kind, const DomainDataset& source,
                              const DomainDataset& target,
                              const TrainConfig& cfg, const EvalSets& eval) {
  if (kind == BaselineKind::mcd) {
    TrainConfig mcd = cfg;
    mcd.n_g = 1;
    mcd.n_c = 2;
    return train_edh(source, target, mcd, eval);
  }

  // source-only: supervised updates, the target dataset is never touched.
  if (source.size() == 0)
    throw std::invalid_argument("train_baseline: empty source dataset");
  const std::vector<int>& source_y = source.train_labels();

  GeneratorConfig gcfg = generator_config_for(cfg.profile, source.dim());
  ClassifierConfig ccfg = classifier_config_for(cfg.profile, source.n_classes);
  EdhTrainResult result{
      build_ensemble(gcfg, ccfg, cfg.n_g, cfg.n_c, derive_seed(cfg.seed, 0)),
      {}};
  EnsembleModel& model = result.model;

  AdamConfig adam{cfg.lr};
  Adam opt_g(model.generator_parameters(), adam);
  Adam opt_c(model.classifier_parameters(), adam);
  IndexCycler cycler(source.size(), Rng(derive_seed(cfg.seed, 1)));
  const int iters_per_epoch = static_cast<int>(
      (source.size() + cfg.batch_size - 1) / cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRow row;
    row.epoch = epoch;
    for (int it = 0; it < iters_per_epoch; ++it) {
      std::vector<int> rows = cycler.next(cfg.batch_size);
      Tensor x = tensor_from_matrix(gather_rows(source.features, rows));
      std::vector<int> y;
      y.reserve(rows.size());
      for (int r : rows) y.push_back(source_y[r]);

      EnsembleActivations acts =
          ensemble_forward(model, x, BnMode::train, BnMode::train);
      Tensor l_s = source_loss(acts.logits, y);
      zero_all(model);
      backward(l_s);
      opt_g.step();
      opt_c.step();
      row.l_s += l_s.value();
    }
    row.l_s /= iters_per_epoch;
    fill_eval_columns(row, model, eval);
    result.curve.rows.push_back(row);
  }
  return result;
}

// ---- evaluation --------------------------------------------------------

namespace {

EvalMetrics metrics_from_prediction(const Prediction& pred,
                                    const std::vector<int>& labels,
                                    int n_classes) {
  EvalMetrics m;
  m.samples = static_cast<int>(labels.size());
  m.confusion.assign(n_classes, std::vector<int>(n_classes, 0));
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    m.confusion[labels[i]][pred.voted[i]] += 1;
    if (pred.voted[i] == labels[i]) ++correct;
  }
  m.accuracy = static_cast<double>(correct) / std::max<std::size_t>(1, labels.size());
  m.per_class_accuracy.assign(n_classes, 0.0);
  for (int c = 0; c < n_classes; ++c) {
    int total = 0;
    for (int d = 0; d < n_classes; ++d) total += m.confusion[c][d];
    if (total > 0)
      m.per_class_accuracy[c] =
          static_cast<double>(m.confusion[c][c]) / total;
  }
  return m;
}

}  // namespace

EvalMetrics evaluate(EnsembleModel& model, const DomainDataset& ds,
                     int timing_repeats) {
  Prediction pred = ensemble_predict(model, ds.features, BnMode::eval);
  EvalMetrics m =
      metrics_from_prediction(pred, ds.eval_labels(), model.ccfg.n_classes);

  std::vector<double> per_sample_ms;
  per_sample_ms.reserve(timing_repeats);
  for (int r = 0; r < timing_repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    ensemble_predict(model, ds.features, BnMode::eval);
    auto t1 = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    per_sample_ms.push_back(ms / std::max(1, ds.size()));
  }
  std::sort(per_sample_ms.begin(), per_sample_ms.end());
  m.forward_time_ms_per_sample = per_sample_ms[per_sample_ms.size() / 2];
  return m;
}

EvalMetrics evaluate(StudentModel& model, const DomainDataset& ds,
                     int timing_repeats) {
  return evaluate(model.net, ds, timing_repeats);
}

void write_curve_csv(const std::filesystem::path& path,
                     const LearningCurve& curve) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("cannot write curve: " + path.string());
  out << "epoch,source_test_acc,target_test_acc,L_s,L_dc,L_dg,L_e\n";
  char buf[192];
  for (const EpochRow& r : curve.rows) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                  r.source_test_acc, r.target_test_acc, r.l_s, r.l_dc, r.l_dg,
                  r.l_e);
    out << buf;
  }
}

}  // namespace edh
