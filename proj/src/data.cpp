#include "edh/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "edh/rng.hpp"

namespace edh {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

}  // namespace

const std::vector<int>& DomainDataset::train_labels() const {
  if (role == DomainRole::target)
    fail("train_labels: target-domain labels are hidden from training");
  if (labels.empty()) fail("train_labels: dataset has no labels");
  return labels;
}

const std::vector<int>& DomainDataset::eval_labels() const {
  if (labels.empty()) fail("eval_labels: dataset has no labels");
  return labels;
}

DomainDataset DomainDataset::without_labels() const {
  DomainDataset out = *this;
  out.labels.clear();
  return out;
}

std::uint64_t dataset_hash(const DomainDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed_bytes = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed_bytes(ds.features.v.data(), ds.features.v.size() * sizeof(double));
  feed_bytes(ds.labels.data(), ds.labels.size() * sizeof(int));
  feed_bytes(ds.subjects.data(), ds.subjects.size() * sizeof(int));
  return h;
}

// ---- two moons ---------------------------------------------------------

DomainDataset make_moons(const MoonSpec& spec, std::uint64_t seed,
                         DomainRole role) {
  if (spec.noise_sigma < 0) fail("make_moons: noise_sigma must be >= 0");
  const int n = spec.points_per_moon;
  DomainDataset ds;
  ds.role = role;
  ds.n_classes = 2;
  ds.features = Matrix(2 * n, 2);
  ds.labels.resize(2 * n);
  ds.subjects.assign(2 * n, 0);

  Rng rng(seed);
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < n; ++i) {
    double t = n > 1 ? pi * i / (n - 1) : 0.0;
    // upper moon, class 0
    ds.features.at(i, 0) = std::cos(t);
    ds.features.at(i, 1) = std::sin(t);
    ds.labels[i] = 0;
    // lower moon, class 1
    ds.features.at(n + i, 0) = 1.0 - std::cos(t);
    ds.features.at(n + i, 1) = 0.5 - std::sin(t);
    ds.labels[n + i] = 1;
  }
  for (int i = 0; i < 2 * n; ++i) {
    ds.features.at(i, 0) += rng.normal(0.0, spec.noise_sigma);
    ds.features.at(i, 1) += rng.normal(0.0, spec.noise_sigma);
  }
  const double theta = spec.rotation_deg * pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  for (int i = 0; i < 2 * n; ++i) {
    double x = ds.features.at(i, 0), y = ds.features.at(i, 1);
    ds.features.at(i, 0) = c * x - s * y + spec.translation[0];
    ds.features.at(i, 1) = s * x + c * y + spec.translation[1];
  }
  return ds;
}

// ---- multi-view -------------------------------------------------------------

namespace {

std::vector<std::vector<double>> orthonormal_triple(int dim, Rng& rng) {
  std::vector<std::vector<double>> v(3, std::vector<double>(dim));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < dim; ++j) v[i][j] = rng.normal();
    for (int k = 0; k < i; ++k) {  // Gram-Schmidt
      double dot = 0;
      for (int j = 0; j < dim; ++j) dot += v[i][j] * v[k][j];
      for (int j = 0; j < dim; ++j) v[i][j] -= dot * v[k][j];
    }
    double norm = 0;
    for (int j = 0; j < dim; ++j) norm += v[i][j] * v[i][j];
    norm = std::sqrt(norm);
    if (norm < 1e-9) fail("make_multiview: degenerate random directions");
    for (int j = 0; j < dim; ++j) v[i][j] /= norm;
  }
  return v;
}

void check_orthonormal(const std::vector<std::vector<double>>& v, int dim) {
  if (v.size() != 3) fail("make_multiview: exactly three directions required");
  for (int i = 0; i < 3; ++i) {
    if (static_cast<int>(v[i].size()) != dim)
      fail("make_multiview: direction dimension mismatch");
    double norm = 0;
    for (double x : v[i]) norm += x * x;
    if (std::fabs(norm - 1.0) > 1e-9)
      fail("make_multiview: directions must have unit norm");
  }
  for (int i = 0; i < 3; ++i)
    for (int j = i + 1; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < dim; ++k) dot += v[i][k] * v[j][k];
      if (std::fabs(dot) > 1e-9)
        fail("make_multiview: directions must be orthogonal");
    }
}

}  // namespace

MultiViewData make_multiview(const MultiViewSpec& spec, std::uint64_t seed) {
  if (spec.alpha < 0.0 || spec.alpha > 1.0)
    fail("make_multiview: alpha must lie in [0, 1]");
  for (double k : spec.coefficients)
    if (k < 0) fail("make_multiview: coefficients must be >= 0");
  Rng rng(seed);
  MultiViewData data;
  data.directions = spec.directions.empty()
                        ? orthonormal_triple(spec.feature_dim, rng)
                        : spec.directions;
  check_orthonormal(data.directions, spec.feature_dim);

  auto embed = [&](const std::array<bool, 3>& present) {
    std::vector<double> x(spec.feature_dim, 0.0);
    for (int f = 0; f < 3; ++f)
      if (present[f])
        for (int j = 0; j < spec.feature_dim; ++j)
          x[j] += spec.coefficients[f] * data.directions[f][j];
    return x;
  };

  const int n = spec.n_samples;
  // Source: half positive (all three hidden features), half negative.
  {
    DomainDataset& src = data.source;
    src.role = DomainRole::source;
    src.n_classes = 2;
    src.features = Matrix(n, spec.feature_dim);
    src.labels.resize(n);
    src.subjects.assign(n, 0);
    const int pos = n / 2;
    for (int i = 0; i < n; ++i) {
      bool positive = i < pos;
      std::vector<double> x =
          positive ? embed({true, true, true}) : embed({false, false, false});
      std::copy(x.begin(), x.end(), src.features.row(i));
      src.labels[i] = positive ? 1 : 0;
    }
  }
  // Target: fraction alpha carries all three features, (1-alpha)/3 exactly
  // one each; the slices exhaust the set.
  {
    DomainDataset& tgt = data.target;
    tgt.role = DomainRole::target;
    tgt.n_classes = 2;
    int per_single =
        static_cast<int>(std::floor(n * (1.0 - spec.alpha) / 3.0 + 0.5));
    int n_all = n - 3 * per_single;
    if (n_all < 0) fail("make_multiview: n_samples too small for alpha");
    tgt.features = Matrix(n, spec.feature_dim);
    tgt.labels.assign(n, 1);
    tgt.subjects.assign(n, 1);
    int row = 0;
    for (int i = 0; i < n_all; ++i, ++row) {
      std::vector<double> x = embed({true, true, true});
      std::copy(x.begin(), x.end(), tgt.features.row(row));
    }
    for (int f = 0; f < 3; ++f)
      for (int i = 0; i < per_single; ++i, ++row) {
        std::array<bool, 3> present{false, false, false};
        present[f] = true;
        std::vector<double> x = embed(present);
        std::copy(x.begin(), x.end(), tgt.features.row(row));
      }
  }
  return data;
}

// ---- shallow features --------------------------------------------------

std::vector<double> extract_imu_features(const Matrix& window) {
  if (window.rows < 2)
    fail("extract_imu_features: window must have at least 2 samples");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(window.cols) * 6);
  for (int c = 0; c < window.cols; ++c) {
    double mean = 0, mx = window.at(0, c), mn = window.at(0, c);
    for (int r = 0; r < window.rows; ++r) {
      double v = window.at(r, c);
      mean += v;
      mx = std::max(mx, v);
      mn = std::min(mn, v);
    }
    mean /= window.rows;
    double var = 0;
    for (int r = 0; r < window.rows; ++r) {
      double d = window.at(r, c) - mean;
      var += d * d;
    }
    var /= window.rows;  // population variance
    out.push_back(mean);
    out.push_back(std::sqrt(var));
    out.push_back(mx);
    out.push_back(mn);
    out.push_back(window.at(0, c));
    out.push_back(window.at(window.rows - 1, c));
  }
  return out;
}

namespace {

// Levinson-Durbin on the biased autocorrelation; predictor convention
// x_t = sum_m a[m] x_{t-m}.
std::vector<double> ar_coefficients(const std::vector<double>& x, int order) {
  const int n = static_cast<int>(x.size());
  std::vector<double> r(order + 1, 0.0);
  for (int lag = 0; lag <= order; ++lag) {
    for (int t = 0; t + lag < n; ++t) r[lag] += x[t] * x[t + lag];
    r[lag] /= n;
  }
  std::vector<double> a(order, 0.0);
  if (r[0] <= 0.0) return a;  // all-zero (or degenerate) window
  double err = r[0];
  for (int i = 1; i <= order; ++i) {
    double acc = r[i];
    for (int j = 1; j < i; ++j) acc -= a[j - 1] * r[i - j];
    double k = acc / err;
    std::vector<double> prev(a.begin(), a.begin() + (i - 1));
    a[i - 1] = k;
    for (int j = 0; j < i - 1; ++j) a[j] = prev[j] - k * prev[i - 2 - j];
    err *= (1.0 - k * k);
    if (err <= 0.0) break;
  }
  return a;
}

}  // namespace

std::vector<double> extract_emg_features(const std::vector<double>& window,
                                         const EmgFeatureOptions& opts) {
  const int n = static_cast<int>(window.size());
  if (n <= opts.ar_order + 1)
    fail("extract_emg_features: window too short for the AR order");
  double mav = 0, wl = 0;
  int ssc = 0, zc = 0;
  for (int t = 0; t < n; ++t) mav += std::fabs(window[t]);
  mav /= n;
  for (int t = 0; t + 1 < n; ++t) {
    wl += std::fabs(window[t + 1] - window[t]);
    if (-window[t] * window[t + 1] > opts.zc_threshold) ++zc;
  }
  for (int t = 1; t + 1 < n; ++t) {
    double left = window[t] - window[t - 1];
    double right = window[t] - window[t + 1];
    if (left * right > opts.ssc_threshold) ++ssc;
  }
  std::vector<double> out{mav, wl, static_cast<double>(ssc),
                          static_cast<double>(zc)};
  std::vector<double> ar = ar_coefficients(window, opts.ar_order);
  out.insert(out.end(), ar.begin(), ar.end());
  return out;
}

// ---- DSADS -------------------------------------------------------------

DsadsSensor dsads_sensor_from_string(const std::string& name) {
  if (name == "torso" || name == "T") return DsadsSensor::torso;
  if (name == "right-arm" || name == "RA") return DsadsSensor::right_arm;
  if (name == "left-arm" || name == "LA") return DsadsSensor::left_arm;
  if (name == "right-leg" || name == "RL") return DsadsSensor::right_leg;
  if (name == "left-leg" || name == "LL") return DsadsSensor::left_leg;
  fail("unknown DSADS sensor: " + name);
}

namespace {

Matrix parse_segment_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  Matrix m(125, 45);
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty() && row == 125) break;
    if (row >= 125) fail(path.string() + ": more than 125 rows");
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col >= 45) fail(path.string() + ": more than 45 columns");
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        if (!std::isfinite(v)) fail(path.string() + ": non-finite value");
        m.at(row, col) = v;
      } catch (const std::invalid_argument&) {
        fail(path.string() + ": non-numeric cell '" + cell + "'");
      }
      ++col;
    }
    if (col != 45) fail(path.string() + ": expected 45 columns, got " +
                        std::to_string(col));
    ++row;
  }
  if (row != 125)
    fail(path.string() + ": expected 125 rows, got " + std::to_string(row));
  return m;
}

Matrix select_sensor_channels(const Matrix& window,
                              const std::vector<DsadsSensor>& sensors) {
  if (sensors.empty()) return window;
  Matrix out(window.rows, static_cast<int>(sensors.size()) * 9);
  int oc = 0;
  for (DsadsSensor s : sensors) {
    int base = static_cast<int>(s) * 9;
    for (int c = 0; c < 9; ++c, ++oc)
      for (int r = 0; r < window.rows; ++r)
        out.at(r, oc) = window.at(r, base + c);
  }
  return out;
}

}  // namespace

std::map<int, DomainDataset> load_dsads(const std::filesystem::path& root,
                                        const DsadsOptions& opts) {
  if (!std::filesystem::is_directory(root))
    fail("load_dsads: no such directory: " + root.string());
  std::map<int, DomainDataset> per_subject;
  int feature_dim = -1;
  for (int a = 1; a <= 19; ++a) {
    char adir[8];
    std::snprintf(adir, sizeof(adir), "a%02d", a);
    std::filesystem::path apath = root / adir;
    if (!std::filesystem::is_directory(apath)) continue;
    for (int p = 1; p <= 8; ++p) {
      std::filesystem::path ppath = apath / ("p" + std::to_string(p));
      if (!std::filesystem::is_directory(ppath)) continue;
      for (int s = 1; s <= 60; ++s) {
        char sname[12];
        std::snprintf(sname, sizeof(sname), "s%02d.txt", s);
        std::filesystem::path spath = ppath / sname;
        if (!std::filesystem::exists(spath)) continue;
        Matrix window = select_sensor_channels(parse_segment_file(spath),
                                               opts.sensors);
        std::vector<double> feats = extract_imu_features(window);
        if (feature_dim < 0) feature_dim = static_cast<int>(feats.size());
        DomainDataset& ds = per_subject[p];
        if (ds.features.cols == 0) ds.features.cols = feature_dim;
        ds.features.v.insert(ds.features.v.end(), feats.begin(), feats.end());
        ds.features.rows += 1;
        ds.labels.push_back(a - 1);
        ds.subjects.push_back(p);
        ds.n_classes = 19;
      }
    }
  }
  if (per_subject.empty())
    fail("load_dsads: no segment files under " + root.string());
  return per_subject;
}

// ---- feature CSV -------------------------------------------------------

DomainDataset load_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) fail(path.string() + ": empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "subject" || header[1] != "label")
    fail(path.string() + ": header must start with subject,label,f0,...");
  std::set<std::string> seen;
  for (const std::string& h : header)
    if (!seen.insert(h).second)
      fail(path.string() + ": duplicate header name '" + h + "'");
  const int dim = static_cast<int>(header.size()) - 2;
  for (int i = 0; i < dim; ++i)
    if (header[2 + i] != "f" + std::to_string(i))
      fail(path.string() + ": feature columns must be named f0..f" +
           std::to_string(dim - 1));

  DomainDataset ds;
  ds.features.cols = dim;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (static_cast<int>(cells.size()) != dim + 2)
      fail(path.string() + ":" + std::to_string(line_no) + ": expected " +
           std::to_string(dim + 2) + " cells, got " +
           std::to_string(cells.size()));
    try {
      ds.subjects.push_back(std::stoi(cells[0]));
      ds.labels.push_back(std::stoi(cells[1]));
      for (int i = 0; i < dim; ++i)
        ds.features.v.push_back(std::stod(cells[2 + i]));
    } catch (const std::exception&) {
      fail(path.string() + ":" + std::to_string(line_no) +
           ": non-numeric cell");
    }
    ds.features.rows += 1;
  }
  int max_label = -1;
  for (int y : ds.labels) {
    if (y < 0) fail(path.string() + ": negative label");
    max_label = std::max(max_label, y);
  }
  ds.n_classes = max_label + 1;
  return ds;
}

void write_feature_csv(const std::filesystem::path& path,
                       const DomainDataset& ds) {
  std::ofstream out(path);
  if (!out) fail("cannot write " + path.string());
  out << "subject,label";
  for (int i = 0; i < ds.dim(); ++i) out << ",f" << i;
  out << "\n";
  char buf[32];
  for (int r = 0; r < ds.size(); ++r) {
    out << ds.subjects[r] << "," << (ds.labels.empty() ? -1 : ds.labels[r]);
    for (int c = 0; c < ds.dim(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.features.at(r, c));
      out << "," << buf;
    }
    out << "\n";
  }
}

std::map<int, DomainDataset> split_by_subject(const DomainDataset& ds) {
  std::map<int, DomainDataset> out;
  for (int r = 0; r < ds.size(); ++r) {
    DomainDataset& d = out[ds.subjects[r]];
    if (d.features.cols == 0) d.features.cols = ds.dim();
    const double* row = ds.features.row(r);
    d.features.v.insert(d.features.v.end(), row, row + ds.dim());
    d.features.rows += 1;
    if (!ds.labels.empty()) d.labels.push_back(ds.labels[r]);
    d.subjects.push_back(ds.subjects[r]);
    d.n_classes = ds.n_classes;
  }
  return out;
}

// ---- LOSO split --------------------------------------------------------

namespace {

void append_rows(DomainDataset& dst, const DomainDataset& src,
                 const std::vector<int>& rows) {
  if (dst.features.cols == 0) dst.features.cols = src.dim();
  for (int r : rows) {
    const double* row = src.features.row(r);
    dst.features.v.insert(dst.features.v.end(), row, row + src.dim());
    dst.features.rows += 1;
    dst.labels.push_back(src.labels[r]);
    dst.subjects.push_back(src.subjects[r]);
  }
  dst.n_classes = std::max(dst.n_classes, src.n_classes);
}

}  // namespace

LosoSplit split_loso(const std::map<int, DomainDataset>& per_subject,
                     int target_subject, std::uint64_t seed,
                     double train_fraction) {
  if (!per_subject.count(target_subject))
    fail("split_loso: unknown subject " + std::to_string(target_subject));
  Rng rng(seed);
  LosoSplit split;
  split.source_train.role = DomainRole::source;
  split.source_test.role = DomainRole::source;
  split.target_train.role = DomainRole::target;
  split.target_test.role = DomainRole::target;

  for (const auto& [subject, ds] : per_subject) {
    // per-class stratified shuffle inside each subject
    std::map<int, std::vector<int>> by_class;
    for (int r = 0; r < ds.size(); ++r) by_class[ds.labels[r]].push_back(r);
    std::vector<int> train_rows, test_rows;
    for (auto& [label, rows] : by_class) {
      rng.shuffle(rows);
      int n_train = static_cast<int>(
          std::floor(train_fraction * rows.size() + 0.5));
      for (std::size_t i = 0; i < rows.size(); ++i)
        (static_cast<int>(i) < n_train ? train_rows : test_rows)
            .push_back(rows[i]);
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    if (subject == target_subject) {
      append_rows(split.target_train, ds, train_rows);
      append_rows(split.target_test, ds, test_rows);
    } else {
      append_rows(split.source_train, ds, train_rows);
      append_rows(split.source_test, ds, test_rows);
    }
  }
  split.target_train.labels.clear();  // hidden from training by construction
  return split;
}

}  // namespace edh
