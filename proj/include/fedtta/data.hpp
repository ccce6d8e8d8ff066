#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/rng.hpp>

namespace fedtta {

namespace detail {
inline thread_local int eval_label_depth = 0;
}

// Labels of test clients (and validation labels) may only be read while an
// evaluation scope is open; the accuracy computations open one, adaptation
// and training code never does. Violations throw immediately.
class EvalLabelScope {
 public:
  EvalLabelScope() { ++detail::eval_label_depth; }
  ~EvalLabelScope() { --detail::eval_label_depth; }
  EvalLabelScope(const EvalLabelScope&) = delete;
  EvalLabelScope& operator=(const EvalLabelScope&) = delete;
};

inline bool eval_labels_allowed() { return detail::eval_label_depth > 0; }

struct LabeledDataset {
  Tensor features;  // [m, d]
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.rank() == 2 ? features.shape()[1] : 0; }

  void validate() const {
    if (features.rank() != 2 || features.shape()[0] != labels.size())
      throw std::invalid_argument("LabeledDataset: feature/label count mismatch");
    for (int y : labels)
      if (y < 0 || static_cast<std::size_t>(y) >= classes)
        throw std::invalid_argument("LabeledDataset: label out of range");
  }
};

struct UnlabeledDataset {
  Tensor features;  // [m, d]
  std::size_t size() const { return features.rank() == 2 ? features.shape()[0] : 0; }
};

enum class ClientRole { training, test };

namespace detail {

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.shape()[1];
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.at(rows[i], j);
  return Tensor({rows.size(), d}, std::move(out));
}

}  // namespace detail

// One client's data. Training clients carry an 85:15 train/validation split
// (validation count rounded down) made by a seeded shuffle; test clients hold
// a single unlabeled-for-adaptation pool. Label reads are audited.
class ClientDataset {
 public:
  ClientDataset(int id, ClientRole role, Tensor features, std::vector<int> labels,
                std::size_t classes, std::uint64_t split_seed)
      : id_(id), role_(role), classes_(classes), features_(std::move(features)),
        labels_(std::move(labels)) {
    if (labels_.empty()) throw std::invalid_argument("ClientDataset: empty client");
    histogram_.assign(classes_, 0);
    for (int y : labels_) ++histogram_[static_cast<std::size_t>(y)];

    if (role_ == ClientRole::training) {
      std::vector<std::size_t> order(labels_.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng(mix64(split_seed, 0x73706c69));
      rng.shuffle(order);
      const std::size_t val_count = labels_.size() * 15 / 100;
      const std::size_t train_count = labels_.size() - val_count;
      train_rows_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_count));
      val_rows_.assign(order.begin() + static_cast<std::ptrdiff_t>(train_count), order.end());
      train_features_ = detail::gather_rows(features_, train_rows_);
      val_features_ = val_rows_.empty() ? Tensor() : detail::gather_rows(features_, val_rows_);
      for (std::size_t r : train_rows_) train_labels_.push_back(labels_[r]);
      for (std::size_t r : val_rows_) val_labels_.push_back(labels_[r]);
    }
  }

  int id() const { return id_; }
  ClientRole role() const { return role_; }
  std::size_t size() const { return labels_.size(); }
  std::size_t classes() const { return classes_; }
  std::size_t dim() const { return features_.shape()[1]; }

  // unlabeled views — always allowed
  const Tensor& features() const { return features_; }
  const Tensor& train_features() const {
    require_training("train_features");
    return train_features_;
  }
  const Tensor& validation_features() const {
    require_training("validation_features");
    return val_features_;
  }
  std::size_t train_size() const {
    require_training("train_size");
    return train_rows_.size();
  }
  std::size_t validation_size() const {
    require_training("validation_size");
    return val_rows_.size();
  }

  // labels of the local train split drive the client's own optimization
  std::span<const int> train_labels() const {
    require_training("train_labels");
    return train_labels_;
  }

  // audit-gated label views, for accuracy computation only
  std::span<const int> validation_labels() const {
    require_training("validation_labels");
    require_eval_scope("validation_labels");
    return val_labels_;
  }
  std::span<const int> all_labels() const {
    require_eval_scope("all_labels");
    return labels_;
  }

  // per-class counts, computed at construction; metadata, not label access
  std::span<const std::size_t> label_histogram() const { return histogram_; }
  std::size_t distinct_labels() const {
    std::size_t n = 0;
    for (std::size_t c : histogram_)
      if (c > 0) ++n;
    return n;
  }

  // multiset of (row, label) pairs for conservation checks
  std::vector<std::pair<std::vector<double>, int>> sample_multiset() const {
    require_eval_scope("sample_multiset");
    std::vector<std::pair<std::vector<double>, int>> out;
    const std::size_t d = dim();
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      std::vector<double> row(d);
      for (std::size_t j = 0; j < d; ++j) row[j] = features_.at(i, j);
      out.emplace_back(std::move(row), labels_[i]);
    }
    return out;
  }

  friend ClientDataset reduce_client_data(const ClientDataset&, double, std::uint64_t);

 private:
  void require_training(const char* what) const {
    if (role_ != ClientRole::training)
      throw std::logic_error(std::string(what) + ": not a training client");
  }
  static void require_eval_scope(const char* what) {
    if (!eval_labels_allowed())
      throw std::logic_error(std::string(what) + ": label access outside an evaluation scope");
  }

  int id_;
  ClientRole role_;
  std::size_t classes_;
  Tensor features_;
  std::vector<int> labels_;
  std::vector<std::size_t> histogram_;
  std::vector<std::size_t> train_rows_, val_rows_;
  Tensor train_features_, val_features_;
  std::vector<int> train_labels_, val_labels_;
};

// ---------------------------------------------------------------------------
// synthetic task
// ---------------------------------------------------------------------------

struct BaseTask {
  LabeledDataset data;
  Tensor means;  // [C, d]
  std::uint64_t seed = 0;

  std::size_t classes() const { return data.classes; }
  std::size_t dim() const { return data.dim(); }
};

namespace detail {

// cluster means with pairwise distance >= 4 (unit covariance clusters),
// rejection-sampled from a Gaussian whose scale grows until placement fits;
// the initial scale targets a typical pairwise distance just above the
// minimum, which keeps the task learnable but not saturated
inline Tensor place_means(std::size_t classes, std::size_t dim, Rng& rng) {
  const double min_dist = 4.0;
  double scale = 4.5 / std::sqrt(2.0 * static_cast<double>(dim));
  std::vector<std::vector<double>> means;
  int rejects = 0;
  while (means.size() < classes) {
    std::vector<double> cand(dim);
    for (auto& v : cand) v = scale * rng.normal();
    bool ok = true;
    for (const auto& m : means) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d2 += (cand[j] - m[j]) * (cand[j] - m[j]);
      if (d2 < min_dist * min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      means.push_back(std::move(cand));
    } else if (++rejects % 100 == 0) {
      scale *= 1.2;
    }
  }
  std::vector<double> flat;
  flat.reserve(classes * dim);
  for (const auto& m : means) flat.insert(flat.end(), m.begin(), m.end());
  return Tensor({classes, dim}, std::move(flat));
}

}  // namespace detail

// C unit-covariance Gaussian clusters, class counts balanced within one,
// sample order shuffled; fully determined by the seed
inline BaseTask generate_base_task(std::size_t classes, std::size_t dim, std::size_t samples,
                                   std::uint64_t seed) {
  if (classes < 2 || dim < 2) throw std::invalid_argument("generate_base_task: need C >= 2, d >= 2");
  Rng rng(mix64(seed, 0x7461736b));
  Tensor means = detail::place_means(classes, dim, rng);

  std::vector<int> labels(samples);
  for (std::size_t i = 0; i < samples; ++i) labels[i] = static_cast<int>(i % classes);
  rng.shuffle(labels);

  std::vector<double> x(samples * dim);
  for (std::size_t i = 0; i < samples; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = 0; j < dim; ++j) x[i * dim + j] = means.at(c, j) + rng.normal();
  }

  BaseTask task;
  task.data = LabeledDataset{Tensor({samples, dim}, std::move(x)), std::move(labels), classes};
  task.means = means;
  task.seed = seed;
  task.data.validate();
  return task;
}

// fresh draws from the same mixture, labels discarded
inline UnlabeledDataset make_public_dataset(const BaseTask& task, std::size_t m_p,
                                            std::uint64_t seed) {
  if (m_p < 1) throw std::invalid_argument("make_public_dataset: m_p must be positive");
  Rng rng(mix64(seed, 0x7075626c));
  const std::size_t c_total = task.classes(), d = task.dim();
  std::vector<double> x(m_p * d);
  for (std::size_t i = 0; i < m_p; ++i) {
    const std::size_t c = i % c_total;
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = task.means.at(c, j) + rng.normal();
  }
  return UnlabeledDataset{Tensor({m_p, d}, std::move(x))};
}

// ---------------------------------------------------------------------------
// partitioning
// ---------------------------------------------------------------------------

struct PartitionSpec {
  enum class Scheme { pathological, dirichlet, rotated, iid };
  Scheme scheme = Scheme::pathological;
  std::size_t labels_per_client = 2;           // pathological
  double alpha = 0.1;                          // dirichlet, training clients
  double alpha_test = 0.1;                     // dirichlet, test clients
  std::vector<double> angles_train = {0.0};    // rotated, degrees
  std::vector<double> angles_test = {0.0};
  std::size_t n_train_clients = 1;
  std::size_t n_test_clients = 0;
  std::uint64_t seed = 1;

  std::size_t total_clients() const { return n_train_clients + n_test_clients; }

  void validate() const {
    if (n_train_clients < 1) throw std::invalid_argument("PartitionSpec: need training clients");
    if (scheme == Scheme::pathological && labels_per_client < 1)
      throw std::invalid_argument("PartitionSpec: labels_per_client must be >= 1");
    if (scheme == Scheme::dirichlet && (alpha <= 0.0 || alpha_test <= 0.0))
      throw std::invalid_argument("PartitionSpec: alpha must be positive");
    if (scheme == Scheme::rotated && (angles_train.empty() || angles_test.empty()))
      throw std::invalid_argument("PartitionSpec: rotated scheme needs angle sets");
  }
};

// 2-D counterclockwise rotation of the first two feature coordinates
inline LabeledDataset apply_rotation(const LabeledDataset& ds, double angle_degrees) {
  if (ds.dim() < 2) throw std::invalid_argument("apply_rotation: need dim >= 2");
  const double rad = angle_degrees * 3.14159265358979323846264338327950288 / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const std::size_t m = ds.size(), d = ds.dim();
  std::vector<double> x(ds.features.values().begin(), ds.features.values().end());
  for (std::size_t i = 0; i < m; ++i) {
    const double x0 = x[i * d], x1 = x[i * d + 1];
    x[i * d] = c * x0 - s * x1;
    x[i * d + 1] = s * x0 + c * x1;
  }
  return LabeledDataset{Tensor({m, d}, std::move(x)), ds.labels, ds.classes};
}

namespace detail {

struct Assignment {
  std::vector<std::vector<std::size_t>> rows_per_client;
};

// per-class Dirichlet proportions over clients, largest-remainder allocation;
// a pass that leaves any client empty is redrawn, up to ten times
inline Assignment dirichlet_assign(std::span<const std::size_t> pool,
                                   std::span<const int> labels, std::size_t classes,
                                   std::size_t n_clients, double alpha, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t row : pool) by_class[static_cast<std::size_t>(labels[row])].push_back(row);

  for (int attempt = 0; attempt < 10; ++attempt) {
    Assignment a;
    a.rows_per_client.assign(n_clients, {});
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t m_c = by_class[c].size();
      if (m_c == 0) continue;
      std::vector<double> prop = rng.dirichlet(alpha, n_clients);
      // largest remainder rounding to integer counts summing to m_c
      std::vector<std::size_t> counts(n_clients);
      std::vector<std::pair<double, std::size_t>> rem(n_clients);
      std::size_t assigned = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        const double exact = prop[k] * static_cast<double>(m_c);
        counts[k] = static_cast<std::size_t>(exact);
        assigned += counts[k];
        rem[k] = {exact - static_cast<double>(counts[k]), k};
      }
      std::sort(rem.begin(), rem.end(), [](const auto& x, const auto& y) {
        return x.first != y.first ? x.first > y.first : x.second < y.second;
      });
      for (std::size_t r = 0; assigned < m_c; ++r, ++assigned) ++counts[rem[r % n_clients].second];

      std::size_t cursor = 0;
      for (std::size_t k = 0; k < n_clients; ++k)
        for (std::size_t t = 0; t < counts[k]; ++t) a.rows_per_client[k].push_back(by_class[c][cursor++]);
    }
    const bool any_empty = std::any_of(a.rows_per_client.begin(), a.rows_per_client.end(),
                                       [](const auto& v) { return v.empty(); });
    if (!any_empty) return a;
  }
  throw std::runtime_error("partition_dirichlet: a client stayed empty after 10 retries");
}

inline ClientDataset make_client(const LabeledDataset& ds, std::span<const std::size_t> rows,
                                 int id, ClientRole role, std::uint64_t seed) {
  Tensor features = gather_rows(ds.features, rows);
  std::vector<int> labels;
  labels.reserve(rows.size());
  for (std::size_t r : rows) labels.push_back(ds.labels[r]);
  return ClientDataset(id, role, std::move(features), std::move(labels), ds.classes,
                       mix64(seed, static_cast<std::uint64_t>(id)));
}

}  // namespace detail

// McMahan-style shard partition: each client receives labels_per_client
// shards, so it sees at most that many distinct classes; shards are dealt
// round-robin over a seeded shuffle and every sample lands in exactly one
// client. Training/test roles are a seeded 50-style split by client counts.
inline std::vector<ClientDataset> partition_pathological(const LabeledDataset& ds,
                                                         const PartitionSpec& spec) {
  spec.validate();
  const std::size_t n = spec.total_clients(), k = spec.labels_per_client, c_total = ds.classes;
  if (n * k < c_total)
    throw std::invalid_argument("partition_pathological: clients * labels_per_client < classes");

  Rng rng(mix64(spec.seed, 0x70617468));

  // shards per class, remainder spread over a seeded class order
  const std::size_t n_shards = n * k;
  std::vector<std::size_t> shards_per_class(c_total, n_shards / c_total);
  std::vector<std::size_t> class_order(c_total);
  std::iota(class_order.begin(), class_order.end(), 0);
  rng.shuffle(class_order);
  for (std::size_t i = 0; i < n_shards % c_total; ++i) ++shards_per_class[class_order[i]];

  std::vector<std::vector<std::size_t>> by_class(c_total);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<std::vector<std::size_t>> shards;
  shards.reserve(n_shards);
  for (std::size_t c = 0; c < c_total; ++c) {
    rng.shuffle(by_class[c]);
    const std::size_t parts = std::max<std::size_t>(1, shards_per_class[c]);
    const std::size_t m_c = by_class[c].size();
    std::size_t cursor = 0;
    for (std::size_t p = 0; p < parts; ++p) {
      const std::size_t take = m_c / parts + (p < m_c % parts ? 1 : 0);
      shards.emplace_back(by_class[c].begin() + static_cast<std::ptrdiff_t>(cursor),
                          by_class[c].begin() + static_cast<std::ptrdiff_t>(cursor + take));
      cursor += take;
    }
  }
  rng.shuffle(shards);

  std::vector<std::vector<std::size_t>> rows(n);
  for (std::size_t s = 0; s < shards.size(); ++s)
    rows[s % n].insert(rows[s % n].end(), shards[s].begin(), shards[s].end());

  // role assignment by seeded shuffle of client slots
  std::vector<std::size_t> slots(n);
  std::iota(slots.begin(), slots.end(), 0);
  rng.shuffle(slots);

  std::vector<ClientDataset> clients;
  clients.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ClientRole role = i < spec.n_train_clients ? ClientRole::training : ClientRole::test;
    clients.push_back(detail::make_client(ds, rows[slots[i]], static_cast<int>(i), role, spec.seed));
  }
  return clients;
}

// label-skew partition per Dirichlet(alpha): the sample pool is split between
// the training and test sides proportionally to client counts, each side is
// then allocated by per-class Dirichlet proportions
inline std::vector<ClientDataset> partition_dirichlet(const LabeledDataset& ds,
                                                      const PartitionSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x64697269));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t n = spec.total_clients();
  const std::size_t train_pool_size = ds.size() * spec.n_train_clients / n;
  std::span<const std::size_t> train_pool(order.data(), train_pool_size);
  std::span<const std::size_t> test_pool(order.data() + train_pool_size,
                                         ds.size() - train_pool_size);

  auto train_assign = detail::dirichlet_assign(train_pool, ds.labels, ds.classes,
                                               spec.n_train_clients, spec.alpha, rng);
  std::vector<ClientDataset> clients;
  clients.reserve(n);
  for (std::size_t i = 0; i < spec.n_train_clients; ++i)
    clients.push_back(detail::make_client(ds, train_assign.rows_per_client[i],
                                          static_cast<int>(i), ClientRole::training, spec.seed));
  if (spec.n_test_clients > 0) {
    auto test_assign = detail::dirichlet_assign(test_pool, ds.labels, ds.classes,
                                                spec.n_test_clients, spec.alpha_test, rng);
    for (std::size_t i = 0; i < spec.n_test_clients; ++i)
      clients.push_back(detail::make_client(ds, test_assign.rows_per_client[i],
                                            static_cast<int>(spec.n_train_clients + i),
                                            ClientRole::test, spec.seed));
  }
  return clients;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> iid_rows(const LabeledDataset& ds, std::size_t n,
                                                      Rng& rng) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> rows(n);
  for (std::size_t i = 0; i < order.size(); ++i) rows[i % n].push_back(order[i]);
  return rows;
}

}  // namespace detail

// IID deal: seeded shuffle, round-robin
inline std::vector<ClientDataset> partition_iid(const LabeledDataset& ds,
                                                const PartitionSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x69696400));
  auto rows = detail::iid_rows(ds, spec.total_clients(), rng);
  std::vector<ClientDataset> clients;
  clients.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const ClientRole role = i < spec.n_train_clients ? ClientRole::training : ClientRole::test;
    clients.push_back(detail::make_client(ds, rows[i], static_cast<int>(i), role, spec.seed));
  }
  return clients;
}

// concept-shift partition: IID deal, then each client rotates its features by
// an angle drawn with equal probability from its side's angle set
inline std::vector<ClientDataset> partition_rotated(const LabeledDataset& ds,
                                                    const PartitionSpec& spec) {
  spec.validate();
  Rng rng(mix64(spec.seed, 0x726f7461));
  auto rows = detail::iid_rows(ds, spec.total_clients(), rng);
  std::vector<ClientDataset> clients;
  clients.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const bool training = i < spec.n_train_clients;
    const auto& angles = training ? spec.angles_train : spec.angles_test;
    const double angle = angles[rng.uniform_int(angles.size())];

    std::vector<int> labels;
    labels.reserve(rows[i].size());
    for (std::size_t r : rows[i]) labels.push_back(ds.labels[r]);
    LabeledDataset shard{detail::gather_rows(ds.features, rows[i]), std::move(labels), ds.classes};
    LabeledDataset rotated = apply_rotation(shard, angle);
    clients.emplace_back(static_cast<int>(i),
                         training ? ClientRole::training : ClientRole::test, rotated.features,
                         std::move(rotated.labels), rotated.classes,
                         mix64(spec.seed, static_cast<std::uint64_t>(i)));
  }
  return clients;
}

inline std::vector<ClientDataset> partition_clients(const BaseTask& task,
                                                    const PartitionSpec& spec) {
  switch (spec.scheme) {
    case PartitionSpec::Scheme::pathological:
      return partition_pathological(task.data, spec);
    case PartitionSpec::Scheme::dirichlet:
      return partition_dirichlet(task.data, spec);
    case PartitionSpec::Scheme::rotated:
      return partition_rotated(task.data, spec);
    case PartitionSpec::Scheme::iid:
      return partition_iid(task.data, spec);
  }
  throw std::invalid_argument("partition_clients: unknown scheme");
}

// seeded subsample without replacement, size ceil(fraction * m)
inline ClientDataset reduce_client_data(const ClientDataset& ds, double fraction,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw std::invalid_argument("reduce_client_data: fraction must be in (0, 1]");
  const std::size_t m = ds.size();
  const auto keep =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m)));
  if (keep == 0) throw std::invalid_argument("reduce_client_data: empty result");
  if (keep == m) return ds;

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix64(seed, static_cast<std::uint64_t>(ds.id()), 0x72656475));
  rng.shuffle(order);
  order.resize(keep);

  // friend access: labels are carried into the new dataset, not consumed
  std::vector<int> labels;
  labels.reserve(keep);
  for (std::size_t r : order) labels.push_back(ds.labels_[r]);
  Tensor features = detail::gather_rows(ds.features(), order);
  return ClientDataset(ds.id(), ds.role(), std::move(features), std::move(labels), ds.classes(),
                       mix64(seed, static_cast<std::uint64_t>(ds.id())));
}

}  // namespace fedtta
