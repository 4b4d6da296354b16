#ifndef FEDDWA_DATAGEN_HPP
#define FEDDWA_DATAGEN_HPP

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "feddwa/errors.hpp"
#include "feddwa/models.hpp"
#include "feddwa/numkit.hpp"
#include "json.hpp"

namespace feddwa {

enum class PartitionSetting { pathological, dominant_class, dirichlet };

inline std::string_view to_string(PartitionSetting s) {
  switch (s) {
    case PartitionSetting::pathological: return "pathological";
    case PartitionSetting::dominant_class: return "dominant_class";
    case PartitionSetting::dirichlet: return "dirichlet";
  }
  return "?";
}

struct PartitionSpec {
  PartitionSetting setting = PartitionSetting::dirichlet;
  std::size_t num_clients = 20;
  // pathological
  std::size_t classes_per_client = 2;
  // dominant_class
  std::size_t num_groups = 4;
  std::size_t dominant_per_group = 0;  // 0: ceil(C / num_groups)
  double dominant_fraction = 0.8;
  // dirichlet
  double alpha = 0.07;
  std::size_t min_client_samples = 20;
  std::size_t max_attempts = 100;
  // pathological / dominant_class: samples per client, 0 = largest the supply allows
  std::size_t samples_per_client = 0;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 2) throw ConfigError("partition.clients", "need at least 2 clients");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
      throw ConfigError("partition.test_fraction", "must lie in (0, 1)");
    }
    switch (setting) {
      case PartitionSetting::pathological:
        if (classes_per_client == 0) {
          throw ConfigError("partition.classes_per_client", "must be positive");
        }
        break;
      case PartitionSetting::dominant_class:
        if (num_groups == 0) throw ConfigError("partition.num_groups", "must be positive");
        if (num_clients % num_groups != 0) {
          throw ConfigError("partition.num_groups",
                            detail::concat(num_clients, " clients do not split into ", num_groups,
                                           " equal groups"));
        }
        if (!(dominant_fraction > 0.0 && dominant_fraction <= 1.0)) {
          throw ConfigError("partition.s", "dominant fraction must lie in (0, 1]");
        }
        break;
      case PartitionSetting::dirichlet:
        if (!(alpha > 0.0) || !std::isfinite(alpha)) {
          throw ConfigError("partition.alpha", "alpha must be positive");
        }
        if (max_attempts == 0) throw ConfigError("partition.max_attempts", "must be positive");
        break;
    }
  }
};

struct ClientShard {
  Dataset train;
  Dataset test;
};

struct FederatedData {
  std::vector<ClientShard> shards;
  std::vector<std::vector<std::size_t>> class_map;  // per client, train + test
  std::optional<std::vector<int>> group_truth;
  // Rows of the base dataset held by each client; empty for generated tasks.
  std::vector<std::vector<std::size_t>> source_rows;
  std::size_t num_features = 0;
  std::size_t num_classes = 0;

  std::size_t num_clients() const noexcept { return shards.size(); }
};

namespace detail {

// Splits `count` into `parts` near-equal integers; the remainder goes to
// randomly chosen parts.
inline std::vector<std::size_t> even_split(std::size_t count, std::size_t parts, Rng& rng) {
  std::vector<std::size_t> out(parts, count / parts);
  const std::size_t rem = count % parts;
  for (std::size_t idx : rng.sample_without_replacement(parts, rem)) ++out[idx];
  return out;
}

// Test rows per class so that the test shard mirrors the allocation's class
// mix: floor of the proportional share, then largest remainders (lowest class
// first on ties).
inline std::vector<std::size_t> stratified_test_counts(const std::vector<std::size_t>& per_class,
                                                       double test_fraction) {
  std::size_t n = 0;
  for (auto c : per_class) n += c;
  std::size_t target = std::size_t(std::llround(test_fraction * double(n)));
  target = std::clamp<std::size_t>(target, 1, n - 1);
  std::vector<std::size_t> out(per_class.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const double share = double(target) * double(per_class[c]) / double(n);
    out[c] = std::min(per_class[c], std::size_t(std::floor(share)));
    used += out[c];
    rema.emplace_back(share - std::floor(share), c);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; used < target && i < rema.size(); ++i) {
    const std::size_t c = rema[i].second;
    if (out[c] < per_class[c]) {
      ++out[c];
      ++used;
    }
  }
  return out;
}

// Turns per-client row allocations of `base` into train/test shards.
inline FederatedData assemble(const Dataset& base, std::vector<std::vector<std::size_t>> alloc,
                              double test_fraction, Rng& rng) {
  FederatedData fd;
  fd.num_features = base.num_features();
  fd.num_classes = base.num_classes();
  for (std::size_t m = 0; m < alloc.size(); ++m) {
    auto& rows = alloc[m];
    if (rows.size() < 2) {
      throw ConfigError("partition", concat("client ", m, " received ", rows.size(),
                                            " samples; at least 2 are needed for train/test"));
    }
    std::vector<std::vector<std::size_t>> by_class(base.num_classes());
    for (std::size_t r : rows) by_class[std::size_t(base.label(r))].push_back(r);
    std::vector<std::size_t> counts(base.num_classes());
    for (std::size_t c = 0; c < counts.size(); ++c) counts[c] = by_class[c].size();
    const auto test_counts = stratified_test_counts(counts, test_fraction);

    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      rng.shuffle(by_class[c]);
      for (std::size_t k = 0; k < by_class[c].size(); ++k) {
        (k < test_counts[c] ? test_rows : train_rows).push_back(by_class[c][k]);
      }
    }
    fd.shards.push_back({base.subset(train_rows), base.subset(test_rows)});
    fd.class_map.push_back(counts);
    fd.source_rows.push_back(rows);
  }
  return fd;
}

inline std::vector<std::vector<std::size_t>> rows_by_class(const Dataset& base) {
  std::vector<std::vector<std::size_t>> pools(base.num_classes());
  for (std::size_t r = 0; r < base.size(); ++r) pools[std::size_t(base.label(r))].push_back(r);
  return pools;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generated tasks
// ---------------------------------------------------------------------------

// Gaussian class blobs: class means drawn from N(0, separation^2 I), samples
// from N(mean, I). Used as the base dataset for the partitioners.
inline Dataset synth_gaussian(std::size_t samples_per_class, std::size_t num_features,
                              std::size_t num_classes, double separation, Rng& rng) {
  if (samples_per_class == 0 || num_features == 0 || num_classes == 0) {
    throw StructuralError("synth_gaussian: counts must be positive");
  }
  std::vector<double> means(num_classes * num_features);
  for (double& m : means) m = separation * rng.normal();
  std::vector<double> feats;
  std::vector<int> labels;
  feats.reserve(samples_per_class * num_classes * num_features);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      for (std::size_t j = 0; j < num_features; ++j) {
        feats.push_back(means[c * num_features + j] + rng.normal());
      }
      labels.push_back(int(c));
    }
  }
  return Dataset(num_features, num_classes, std::move(feats), std::move(labels));
}

struct ClusterTaskSpec {
  std::size_t num_groups = 4;
  std::size_t clients_per_group = 5;
  std::size_t num_features = 10;
  std::size_t num_classes = 4;
  std::size_t samples_per_client = 100;  // train + test
  double noise = 0.0;                    // label-flip probability
  double margin = 0.5;                   // minimum top-1 minus top-2 score
  double test_fraction = 0.2;
};

// Clients in group g draw x ~ N(0, I) and label it with the group's own random
// linear map (argmax of W_g x), rejecting points closer than `margin` to a
// decision boundary; labels are then flipped to another class with
// probability `noise`. Group ids are assigned in client-index order.
inline FederatedData synth_clusters(const ClusterTaskSpec& spec, Rng& rng) {
  if (spec.num_groups == 0 || spec.clients_per_group == 0 || spec.num_features == 0 ||
      spec.num_classes == 0 || spec.samples_per_client < 2) {
    throw ConfigError("data", "synthetic cluster task needs positive counts and >= 2 samples");
  }
  if (!(spec.noise >= 0.0 && spec.noise <= 1.0)) throw ConfigError("data.noise", "must be in [0,1]");
  if (!(spec.margin >= 0.0)) throw ConfigError("data.margin", "must be non-negative");

  const std::size_t f = spec.num_features;
  const std::size_t c = spec.num_classes;
  const std::size_t n_clients = spec.num_groups * spec.clients_per_group;

  std::vector<std::vector<double>> maps(spec.num_groups, std::vector<double>(c * f));
  for (auto& w : maps) {
    for (double& v : w) v = rng.normal();
  }

  FederatedData fd;
  fd.num_features = f;
  fd.num_classes = c;
  fd.group_truth = std::vector<int>(n_clients);
  std::vector<double> x(f), score(c);

  for (std::size_t m = 0; m < n_clients; ++m) {
    const std::size_t g = m / spec.clients_per_group;
    (*fd.group_truth)[m] = int(g);
    std::vector<double> feats;
    std::vector<int> labels;
    while (labels.size() < spec.samples_per_client) {
      for (double& v : x) v = rng.normal();
      for (std::size_t k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < f; ++j) s += maps[g][k * f + j] * x[j];
        score[k] = s;
      }
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (score[k] > score[best]) best = k;
      }
      double second = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < c; ++k) {
        if (k != best) second = std::max(second, score[k]);
      }
      if (c > 1 && score[best] - second < spec.margin) continue;
      int y = int(best);
      if (c > 1 && spec.noise > 0.0 && rng.bernoulli(spec.noise)) {
        y = int((best + 1 + rng.below(c - 1)) % c);
      }
      feats.insert(feats.end(), x.begin(), x.end());
      labels.push_back(y);
    }
    Dataset all(f, c, std::move(feats), std::move(labels));
    std::vector<std::size_t> rows(all.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    auto client = detail::assemble(all, {rows}, spec.test_fraction, rng);
    fd.shards.push_back(std::move(client.shards.front()));
    fd.class_map.push_back(std::move(client.class_map.front()));
  }
  return fd;
}

// ---------------------------------------------------------------------------
// Partitioners
// ---------------------------------------------------------------------------

// Each client holds exactly `classes_per_client` classes with the same number
// of samples per class. Classes are handed out least-used first (random order
// among equally used classes) so supply is spread evenly.
inline FederatedData partition_pathological(const Dataset& base, const PartitionSpec& spec,
                                            Rng& rng) {
  spec.validate();
  const std::size_t n_classes = base.num_classes();
  const std::size_t k = spec.classes_per_client;
  if (k > n_classes) {
    throw ConfigError("partition.classes_per_client",
                      detail::concat(k, " classes per client but the data has ", n_classes));
  }
  auto pools = detail::rows_by_class(base);
  for (auto& p : pools) rng.shuffle(p);

  std::vector<std::size_t> usage(n_classes, 0);
  std::vector<std::vector<std::size_t>> assigned(spec.num_clients);
  for (std::size_t m = 0; m < spec.num_clients; ++m) {
    std::vector<std::size_t> order(n_classes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return usage[a] < usage[b]; });
    assigned[m].assign(order.begin(), order.begin() + std::ptrdiff_t(k));
    std::sort(assigned[m].begin(), assigned[m].end());
    for (std::size_t c : assigned[m]) ++usage[c];
  }

  std::size_t per_class = std::numeric_limits<std::size_t>::max();
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (usage[c] > 0) per_class = std::min(per_class, pools[c].size() / usage[c]);
  }
  if (spec.samples_per_client > 0) {
    const std::size_t wanted = spec.samples_per_client / k;
    if (wanted == 0 || wanted > per_class) {
      throw ConfigError("partition.samples_per_client",
                        detail::concat("cannot give every client ", wanted,
                                       " samples of each of its classes; supply allows ",
                                       per_class));
    }
    per_class = wanted;
  }
  if (per_class * k < 2) {
    throw ConfigError("partition.classes_per_client",
                      "class supply too small for the requested number of clients");
  }

  std::vector<std::size_t> cursor(n_classes, 0);
  std::vector<std::vector<std::size_t>> alloc(spec.num_clients);
  for (std::size_t m = 0; m < spec.num_clients; ++m) {
    for (std::size_t c : assigned[m]) {
      for (std::size_t s = 0; s < per_class; ++s) alloc[m].push_back(pools[c][cursor[c]++]);
    }
  }
  return detail::assemble(base, std::move(alloc), spec.test_fraction, rng);
}

// Dominant-class block of a group. Disjoint contiguous blocks when they fit;
// otherwise blocks start at evenly spaced offsets and wrap around, which is
// what 4 groups x 3 classes out of 10 requires.
inline std::vector<std::size_t> dominant_classes(std::size_t group, std::size_t num_groups,
                                                 std::size_t block, std::size_t num_classes) {
  std::vector<std::size_t> out;
  const std::size_t start = num_groups * block <= num_classes
                                ? group * block
                                : (group * num_classes) / num_groups;
  for (std::size_t i = 0; i < block; ++i) out.push_back((start + i) % num_classes);
  std::sort(out.begin(), out.end());
  return out;
}

// Every client gets the same number of samples: a fraction s from its group's
// dominant classes, the rest spread over all classes.
inline FederatedData partition_dominant(const Dataset& base, const PartitionSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t n_classes = base.num_classes();
  const std::size_t groups = spec.num_groups;
  if (groups > n_classes) {
    throw ConfigError("partition.num_groups",
                      detail::concat(groups, " groups but only ", n_classes, " classes"));
  }
  const std::size_t block = spec.dominant_per_group > 0
                                ? spec.dominant_per_group
                                : (n_classes + groups - 1) / groups;
  if (block > n_classes) {
    throw ConfigError("partition.dominant_per_group", "exceeds the number of classes");
  }
  const std::size_t per_group = spec.num_clients / groups;

  std::vector<std::vector<std::size_t>> dom(groups);
  for (std::size_t g = 0; g < groups; ++g) dom[g] = dominant_classes(g, groups, block, n_classes);

  auto pools = detail::rows_by_class(base);
  for (auto& p : pools) rng.shuffle(p);

  // Upper bound on per-class demand for shard size n (remainders rounded up).
  auto feasible = [&](std::size_t n) {
    const std::size_t n_dom = std::size_t(std::llround(spec.dominant_fraction * double(n)));
    const std::size_t n_rest = n - n_dom;
    std::vector<std::size_t> demand(n_classes, 0);
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t c : dom[g]) demand[c] += per_group * ((n_dom + block - 1) / block);
    }
    for (auto& d : demand) d += spec.num_clients * ((n_rest + n_classes - 1) / n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (demand[c] > pools[c].size()) return false;
    }
    return true;
  };

  std::size_t n = spec.samples_per_client;
  if (n == 0) {
    n = base.size() / spec.num_clients;
    while (n >= 2 && !feasible(n)) --n;
  }
  if (n < 2 || !feasible(n)) {
    throw ConfigError("partition.samples_per_client",
                      detail::concat("insufficient samples for ", spec.num_clients,
                                     " dominant-class clients of size ", n));
  }

  const std::size_t n_dom = std::size_t(std::llround(spec.dominant_fraction * double(n)));
  const std::size_t n_rest = n - n_dom;
  std::vector<std::size_t> cursor(n_classes, 0);
  std::vector<std::vector<std::size_t>> alloc(spec.num_clients);
  for (std::size_t m = 0; m < spec.num_clients; ++m) {
    const auto& classes = dom[m / per_group];
    std::vector<std::size_t> take(n_classes, 0);
    const auto dom_split = detail::even_split(n_dom, classes.size(), rng);
    for (std::size_t i = 0; i < classes.size(); ++i) take[classes[i]] += dom_split[i];
    const auto rest_split = detail::even_split(n_rest, n_classes, rng);
    for (std::size_t c = 0; c < n_classes; ++c) take[c] += rest_split[c];
    for (std::size_t c = 0; c < n_classes; ++c) {
      for (std::size_t s = 0; s < take[c]; ++s) alloc[m].push_back(pools[c][cursor[c]++]);
    }
  }
  auto fd = detail::assemble(base, std::move(alloc), spec.test_fraction, rng);
  fd.group_truth = std::vector<int>(spec.num_clients);
  for (std::size_t m = 0; m < spec.num_clients; ++m) (*fd.group_truth)[m] = int(m / per_group);
  return fd;
}

// For each class c, p_c ~ Dir(alpha 1_N) and client m receives the slice of
// the shuffled class-c rows between cumulative split points. Allocations in
// which some client ends up below `min_client_samples` are redrawn whole.
inline FederatedData partition_dirichlet(const Dataset& base, const PartitionSpec& spec, Rng& rng) {
  spec.validate();
  const std::size_t n_clients = spec.num_clients;
  auto pools = detail::rows_by_class(base);
  const std::size_t need = std::max<std::size_t>(spec.min_client_samples, 2);

  for (std::size_t attempt = 0; attempt < spec.max_attempts; ++attempt) {
    std::vector<std::vector<std::size_t>> alloc(n_clients);
    for (auto& pool : pools) {
      rng.shuffle(pool);
      const auto p = rng.dirichlet(spec.alpha, n_clients);
      double cum = 0.0;
      std::size_t begin = 0;
      for (std::size_t m = 0; m < n_clients; ++m) {
        cum += p[m];
        std::size_t end = m + 1 == n_clients
                              ? pool.size()
                              : std::min(pool.size(), std::size_t(cum * double(pool.size())));
        end = std::max(end, begin);
        alloc[m].insert(alloc[m].end(), pool.begin() + std::ptrdiff_t(begin),
                        pool.begin() + std::ptrdiff_t(end));
        begin = end;
      }
    }
    const bool ok = std::all_of(alloc.begin(), alloc.end(),
                                [&](const auto& rows) { return rows.size() >= need; });
    if (ok) return detail::assemble(base, std::move(alloc), spec.test_fraction, rng);
  }
  throw ConfigError("partition.alpha",
                    detail::concat("no Dirichlet allocation gave every client >= ", need,
                                   " samples in ", spec.max_attempts, " attempts"));
}

inline FederatedData partition(const Dataset& base, const PartitionSpec& spec, Rng& rng) {
  switch (spec.setting) {
    case PartitionSetting::pathological: return partition_pathological(base, spec, rng);
    case PartitionSetting::dominant_class: return partition_dominant(base, spec, rng);
    case PartitionSetting::dirichlet: return partition_dirichlet(base, spec, rng);
  }
  throw StructuralError("unknown partition setting");
}

// ---------------------------------------------------------------------------
// CSV input and manifest output
// ---------------------------------------------------------------------------

struct CsvSchema {
  bool has_header = false;
  bool scale = false;             // min-max scale each feature column to [0, 1]
  std::size_t num_classes = 0;    // 0: infer as max label + 1
};

// Last column is an integer label, the others real features.
inline Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("data.csv", detail::concat("cannot open '", path.string(), "'"));

  std::vector<double> feats;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;

  auto parse_error = [&](std::size_t col, const std::string& cell, const char* what) {
    return ConfigError("data.csv",
                       detail::concat(path.string(), ":", line_no, ": column ", col + 1, " ('",
                                      cell, "') ", what));
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (schema.has_header && line_no == 1) continue;

    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() < 2) throw parse_error(0, line, "row needs at least one feature and a label");
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw ConfigError("data.csv", detail::concat(path.string(), ":", line_no, ": expected ",
                                                   width, " columns, found ", cells.size()));
    }
    for (std::size_t j = 0; j + 1 < cells.size(); ++j) {
      std::string_view s = cells[j];
      while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
      while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw parse_error(j, cells[j], "is not a finite number");
      }
      feats.push_back(v);
    }
    std::string_view ls = cells.back();
    while (!ls.empty() && ls.front() == ' ') ls.remove_prefix(1);
    while (!ls.empty() && ls.back() == ' ') ls.remove_suffix(1);
    int y = 0;
    auto [ptr, ec] = std::from_chars(ls.data(), ls.data() + ls.size(), y);
    if (ls.empty() || ec != std::errc() || ptr != ls.data() + ls.size()) {
      throw parse_error(cells.size() - 1, cells.back(), "is not an integer label");
    }
    if (y < 0 || (schema.num_classes > 0 && std::size_t(y) >= schema.num_classes)) {
      throw parse_error(cells.size() - 1, cells.back(), "is outside the label range");
    }
    labels.push_back(y);
  }
  if (labels.empty()) throw ConfigError("data.csv", detail::concat(path.string(), ": no rows"));

  const std::size_t f = width - 1;
  if (schema.scale) {
    for (std::size_t j = 0; j < f; ++j) {
      double lo = feats[j], hi = feats[j];
      for (std::size_t r = 0; r < labels.size(); ++r) {
        lo = std::min(lo, feats[r * f + j]);
        hi = std::max(hi, feats[r * f + j]);
      }
      for (std::size_t r = 0; r < labels.size(); ++r) {
        double& v = feats[r * f + j];
        v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
      }
    }
  }
  const std::size_t c = schema.num_classes > 0
                            ? schema.num_classes
                            : std::size_t(*std::max_element(labels.begin(), labels.end())) + 1;
  return Dataset(f, c, std::move(feats), std::move(labels));
}

inline nlohmann::json manifest_json(const FederatedData& fd) {
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t m = 0; m < fd.num_clients(); ++m) {
    nlohmann::json c;
    c["client"] = m;
    c["train_size"] = fd.shards[m].train.size();
    c["test_size"] = fd.shards[m].test.size();
    c["class_histogram"] = fd.class_map[m];
    if (fd.group_truth) c["group"] = (*fd.group_truth)[m];
    clients.push_back(std::move(c));
  }
  nlohmann::json out;
  out["num_clients"] = fd.num_clients();
  out["num_classes"] = fd.num_classes;
  out["num_features"] = fd.num_features;
  out["clients"] = std::move(clients);
  return out;
}

}  // namespace feddwa

#endif  // FEDDWA_DATAGEN_HPP
