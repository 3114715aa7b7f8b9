#include "edh/nets.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace edh {

namespace {

using nlohmann::json;

Tensor he_uniform(int fan_in, int fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / fan_in);
  std::vector<double> w(static_cast<std::size_t>(fan_in) * fan_out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor::from_data({fan_in, fan_out}, std::move(w), true);
}

AffineLayer make_affine(int in, int out, Rng& rng) {
  AffineLayer layer;
  layer.weight = he_uniform(in, out, rng);
  layer.bias = Tensor::zeros({out}, true);
  return layer;
}

}  // namespace

std::vector<int> GeneratorConfig::layer_dims() const {
  std::vector<int> hidden = hidden_widths;
  if (hidden.empty()) {
    if (kind == Kind::moon_ann)
      hidden = {32};
    else
      hidden = {feature_length, feature_length};
  }
  std::vector<int> dims;
  dims.push_back(input_dim);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(feature_length);
  return dims;
}

Tensor AffineLayer::forward(const Tensor& x) const {
  return add_row_bias(matmul(x, weight), bias);
}

BatchNormLayer::BatchNormLayer(int features)
    : gamma(Tensor::from_data({features},
                              std::vector<double>(features, 1.0), true)),
      beta(Tensor::zeros({features}, true)),
      state(features) {}

Tensor BatchNormLayer::forward(const Tensor& x, BnMode mode) {
  return batch_norm(x, gamma, beta, state, mode);
}

Generator::Generator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::vector<int> dims = cfg.layer_dims();
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] <= 0 || dims[i + 1] <= 0)
      throw std::invalid_argument("generator: layer widths must be positive");
    affines_.push_back(make_affine(dims[i], dims[i + 1], rng));
    norms_.emplace_back(dims[i + 1]);
  }
}

Tensor Generator::forward(const Tensor& x, BnMode mode) {
  Tensor h = x;
  for (std::size_t i = 0; i < affines_.size(); ++i)
    h = relu6(norms_[i].forward(affines_[i].forward(h), mode));
  return h;
}

std::vector<Tensor> Generator::parameters() {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < affines_.size(); ++i) {
    out.push_back(affines_[i].weight);
    out.push_back(affines_[i].bias);
    out.push_back(norms_[i].gamma);
    out.push_back(norms_[i].beta);
  }
  return out;
}

Classifier::Classifier(const ClassifierConfig& cfg, Rng& rng) : cfg_(cfg) {
  affines_.push_back(make_affine(cfg.input_dim, cfg.hidden_width, rng));
  norms_.emplace_back(cfg.hidden_width);
  affines_.push_back(make_affine(cfg.hidden_width, cfg.hidden_width, rng));
  norms_.emplace_back(cfg.hidden_width);
  affines_.push_back(make_affine(cfg.hidden_width, cfg.n_classes, rng));
}

Tensor Classifier::scores(const Tensor& features, BnMode mode) {
  Tensor h = relu6(norms_[0].forward(affines_[0].forward(features), mode));
  h = relu6(norms_[1].forward(affines_[1].forward(h), mode));
  return affines_[2].forward(h);
}

std::vector<Tensor> Classifier::parameters() {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < affines_.size(); ++i) {
    out.push_back(affines_[i].weight);
    out.push_back(affines_[i].bias);
    if (i < norms_.size()) {
      out.push_back(norms_[i].gamma);
      out.push_back(norms_[i].beta);
    }
  }
  return out;
}

std::vector<Tensor> EnsembleModel::generator_parameters() {
  std::vector<Tensor> out;
  for (Generator& g : generators)
    for (Tensor& t : g.parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> EnsembleModel::classifier_parameters() {
  std::vector<Tensor> out;
  for (Classifier& c : classifiers)
    for (Tensor& t : c.parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> EnsembleModel::parameters() {
  std::vector<Tensor> out = generator_parameters();
  for (Tensor& t : classifier_parameters()) out.push_back(t);
  return out;
}

std::int64_t EnsembleModel::parameter_count() {
  std::int64_t n = 0;
  for (Tensor& t : parameters()) n += t.numel();
  return n;
}

EnsembleModel build_ensemble(const GeneratorConfig& gcfg,
                             const ClassifierConfig& ccfg, int n_g, int n_c,
                             std::uint64_t seed) {
  if (n_g < 1 || n_c < 1)
    throw std::invalid_argument("build_ensemble: n_g and n_c must be >= 1");
  if (ccfg.input_dim != gcfg.feature_length)
    throw std::invalid_argument(
        "build_ensemble: classifier input_dim must equal feature_length");
  EnsembleModel model;
  model.gcfg = gcfg;
  model.ccfg = ccfg;
  model.n_g = n_g;
  model.n_c = n_c;
  Rng rng(seed);
  model.generators.reserve(n_g);
  for (int i = 0; i < n_g; ++i) model.generators.emplace_back(gcfg, rng);
  model.classifiers.reserve(static_cast<std::size_t>(n_g) * n_c);
  for (int k = 0; k < n_g * n_c; ++k) model.classifiers.emplace_back(ccfg, rng);
  return model;
}

StudentModel build_student(const GeneratorConfig& gcfg,
                           const ClassifierConfig& ccfg, std::uint64_t seed) {
  return StudentModel{build_ensemble(gcfg, ccfg, 1, 1, seed)};
}

// ---- forward / prediction ---------------------------------------------------

Tensor tensor_from_matrix(const Matrix& m) {
  return Tensor::from_data({m.rows, m.cols}, m.v);
}

EnsembleActivations ensemble_forward(EnsembleModel& model, const Tensor& x,
                                     BnMode gen_mode, BnMode cls_mode,
                                     bool detach_features) {
  EnsembleActivations acts;
  acts.features.reserve(model.n_g);
  acts.logits.resize(model.n_g);
  for (int i = 0; i < model.n_g; ++i) {
    Tensor feat = model.generators[i].forward(x, gen_mode);
    if (detach_features) feat = feat.detach();
    acts.features.push_back(feat);
    acts.logits[i].reserve(model.n_c);
    for (int j = 0; j < model.n_c; ++j) {
      Classifier& c = model.classifiers[i * model.n_c + j];
      acts.logits[i].push_back(c.scores(feat, cls_mode));
    }
  }
  return acts;
}

Tensor hypothesis_forward(EnsembleModel& model, int generator_index,
                          int classifier_index, const Tensor& x, BnMode mode) {
  if (generator_index < 0 || generator_index >= model.n_g ||
      classifier_index < 0 || classifier_index >= model.n_g * model.n_c)
    throw std::invalid_argument("hypothesis_forward: index out of range");
  if (model.generator_of(classifier_index) != generator_index)
    throw std::invalid_argument(
        "hypothesis_forward: classifier is not assigned to this generator");
  Tensor feat = model.generators[generator_index].forward(x, mode);
  Tensor scores = model.classifiers[classifier_index].scores(feat, mode);
  return softmax_rows(scores);
}

Prediction ensemble_predict(EnsembleModel& model, const Matrix& x,
                            BnMode mode) {
  if (model.hypothesis_count() < 1)
    throw std::invalid_argument("ensemble_predict: model has no hypotheses");
  Tensor input = tensor_from_matrix(x);
  const int n = model.ccfg.n_classes;
  Prediction pred;
  pred.avg_probs = Matrix(x.rows, n);
  for (int i = 0; i < model.n_g; ++i) {
    Tensor feat = model.generators[i].forward(input, mode);
    for (int j = 0; j < model.n_c; ++j) {
      Classifier& c = model.classifiers[i * model.n_c + j];
      Tensor probs = softmax_rows(c.scores(feat, mode));
      const std::vector<double>& p = probs.data();
      for (std::size_t t = 0; t < p.size(); ++t) pred.avg_probs.v[t] += p[t];
    }
  }
  const double inv = 1.0 / model.hypothesis_count();
  for (double& v : pred.avg_probs.v) v *= inv;
  pred.voted.resize(x.rows);
  for (int r = 0; r < x.rows; ++r) {
    const double* row = pred.avg_probs.row(r);
    int best = 0;
    for (int j = 1; j < n; ++j)
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    pred.voted[r] = best;
  }
  return pred;
}

Matrix pseudo_labels(EnsembleModel& model, const Matrix& x) {
  return ensemble_predict(model, x, BnMode::eval).avg_probs;
}

// ---- state hashing ----------------------------------------------------------

namespace {

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void feed(const double* p, std::size_t n) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  void feed(const std::vector<double>& v) { feed(v.data(), v.size()); }
};

void feed_generator(Fnv& fnv, Generator& g) {
  for (Tensor& t : g.parameters()) fnv.feed(t.data());
  for (BatchNormLayer& bn : g.norms()) {
    fnv.feed(bn.state.running_mean);
    fnv.feed(bn.state.running_var);
  }
}

void feed_classifier(Fnv& fnv, Classifier& c) {
  for (Tensor& t : c.parameters()) fnv.feed(t.data());
  for (BatchNormLayer& bn : c.norms()) {
    fnv.feed(bn.state.running_mean);
    fnv.feed(bn.state.running_var);
  }
}

}  // namespace

std::uint64_t generator_state_hash(EnsembleModel& model) {
  Fnv fnv;
  for (Generator& g : model.generators) feed_generator(fnv, g);
  return fnv.h;
}

std::uint64_t classifier_state_hash(EnsembleModel& model) {
  Fnv fnv;
  for (Classifier& c : model.classifiers) feed_classifier(fnv, c);
  return fnv.h;
}

std::uint64_t state_hash(EnsembleModel& model) {
  Fnv fnv;
  for (Generator& g : model.generators) feed_generator(fnv, g);
  for (Classifier& c : model.classifiers) feed_classifier(fnv, c);
  return fnv.h;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

json affine_to_json(const AffineLayer& a) {
  return json{{"in", a.weight.shape()[0]},
              {"out", a.weight.shape()[1]},
              {"weight", a.weight.data()},
              {"bias", a.bias.data()}};
}

json bn_to_json(const BatchNormLayer& bn) {
  return json{{"gamma", bn.gamma.data()},
              {"beta", bn.beta.data()},
              {"running_mean", bn.state.running_mean},
              {"running_var", bn.state.running_var}};
}

void affine_from_json(const json& j, AffineLayer& a) {
  a.weight = Tensor::from_data({j.at("in").get<int>(), j.at("out").get<int>()},
                               j.at("weight").get<std::vector<double>>(), true);
  a.bias = Tensor::from_data({j.at("out").get<int>()},
                             j.at("bias").get<std::vector<double>>(), true);
}

void bn_from_json(const json& j, BatchNormLayer& bn) {
  auto gamma = j.at("gamma").get<std::vector<double>>();
  int f = static_cast<int>(gamma.size());
  bn.gamma = Tensor::from_data({f}, std::move(gamma), true);
  bn.beta = Tensor::from_data({f}, j.at("beta").get<std::vector<double>>(), true);
  bn.state.running_mean = j.at("running_mean").get<std::vector<double>>();
  bn.state.running_var = j.at("running_var").get<std::vector<double>>();
}

std::string kind_to_string(GeneratorConfig::Kind k) {
  return k == GeneratorConfig::Kind::moon_ann ? "moon-ann" : "signal-dense";
}

GeneratorConfig::Kind kind_from_string(const std::string& s) {
  if (s == "moon-ann") return GeneratorConfig::Kind::moon_ann;
  if (s == "signal-dense") return GeneratorConfig::Kind::signal_dense;
  throw std::invalid_argument("checkpoint: unknown generator kind " + s);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, EnsembleModel& model,
                     const std::string& kind) {
  json j;
  j["format"] = "edhkd-checkpoint";
  j["version"] = 1;
  j["kind"] = kind;
  j["generator_config"] = {{"kind", kind_to_string(model.gcfg.kind)},
                           {"input_dim", model.gcfg.input_dim},
                           {"hidden_widths", model.gcfg.layer_dims()},
                           {"feature_length", model.gcfg.feature_length}};
  j["classifier_config"] = {{"input_dim", model.ccfg.input_dim},
                            {"hidden_width", model.ccfg.hidden_width},
                            {"n_classes", model.ccfg.n_classes}};
  j["n_generators"] = model.n_g;
  j["n_classifiers_per_generator"] = model.n_c;

  json gens = json::array();
  for (Generator& g : model.generators) {
    json layers = json::array();
    for (std::size_t i = 0; i < g.affines().size(); ++i) {
      json layer = affine_to_json(g.affines()[i]);
      layer["norm"] = bn_to_json(g.norms()[i]);
      layers.push_back(std::move(layer));
    }
    gens.push_back(json{{"layers", std::move(layers)}});
  }
  j["generators"] = std::move(gens);

  json clss = json::array();
  for (Classifier& c : model.classifiers) {
    json layers = json::array();
    for (std::size_t i = 0; i < c.affines().size(); ++i) {
      json layer = affine_to_json(c.affines()[i]);
      if (i < c.norms().size()) layer["norm"] = bn_to_json(c.norms()[i]);
      layers.push_back(std::move(layer));
    }
    clss.push_back(json{{"layers", std::move(layers)}});
  }
  j["classifiers"] = std::move(clss);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out << j.dump();
  out << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path.string());
  json j = json::parse(in);
  if (j.value("format", "") != "edhkd-checkpoint" || j.value("version", 0) != 1)
    throw std::runtime_error("unrecognized checkpoint format: " + path.string());

  GeneratorConfig gcfg;
  gcfg.kind = kind_from_string(j.at("generator_config").at("kind"));
  gcfg.input_dim = j.at("generator_config").at("input_dim");
  gcfg.feature_length = j.at("generator_config").at("feature_length");
  auto dims = j.at("generator_config").at("hidden_widths").get<std::vector<int>>();
  // stored as full layer_dims; recover the interior widths
  if (dims.size() >= 2) gcfg.hidden_widths.assign(dims.begin() + 1, dims.end() - 1);

  ClassifierConfig ccfg;
  ccfg.input_dim = j.at("classifier_config").at("input_dim");
  ccfg.hidden_width = j.at("classifier_config").at("hidden_width");
  ccfg.n_classes = j.at("classifier_config").at("n_classes");

  Checkpoint ckpt;
  ckpt.kind = j.value("kind", "ensemble");
  ckpt.model = build_ensemble(gcfg, ccfg, j.at("n_generators"),
                              j.at("n_classifiers_per_generator"), 0);

  const json& gens = j.at("generators");
  for (int i = 0; i < ckpt.model.n_g; ++i) {
    Generator& g = ckpt.model.generators[i];
    const json& layers = gens.at(i).at("layers");
    for (std::size_t l = 0; l < g.affines().size(); ++l) {
      affine_from_json(layers.at(l), g.affines()[l]);
      bn_from_json(layers.at(l).at("norm"), g.norms()[l]);
    }
  }
  const json& clss = j.at("classifiers");
  for (int k = 0; k < ckpt.model.n_g * ckpt.model.n_c; ++k) {
    Classifier& c = ckpt.model.classifiers[k];
    const json& layers = clss.at(k).at("layers");
    for (std::size_t l = 0; l < c.affines().size(); ++l) {
      affine_from_json(layers.at(l), c.affines()[l]);
      if (l < c.norms().size()) bn_from_json(layers.at(l).at("norm"), c.norms()[l]);
    }
  }
  return ckpt;
}

}  // namespace edh
