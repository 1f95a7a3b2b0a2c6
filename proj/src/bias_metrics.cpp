#include "medlab/bias_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"
#include "medlab/csv.hpp"
#include "medlab/error.hpp"
#include "medlab/parallel.hpp"

namespace medlab::metrics {

namespace {

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::ZeroNorm, "cosine of a zero-norm vector");
  return a.dot(b) / (na * nb);
}

// Uniform integer in [0, n) from raw generator output; fixed across standard
// library implementations, unlike std::uniform_int_distribution.
std::uint64_t bounded(std::mt19937_64& gen, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r = gen();
  while (r >= limit) r = gen();
  return r % n;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    if (r > std::numeric_limits<std::uint64_t>::max() / (n - k + i)) return std::numeric_limits<std::uint64_t>::max();
    r = r * (n - k + i) / i;
  }
  return r;
}

std::vector<std::string> sentence_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::SchemaError, std::string("association file lacks '") + key + "'");
  const nlohmann::json* arr = &j.at(key);
  if (arr->is_object()) {
    if (!arr->contains("examples")) throw Error(ErrorCode::SchemaError, std::string("'") + key + "' lacks 'examples'");
    arr = &arr->at("examples");
  }
  if (!arr->is_array()) throw Error(ErrorCode::SchemaError, std::string("'") + key + "' must be a sentence array");
  std::vector<std::string> out;
  for (const auto& s : *arr) {
    if (!s.is_string()) throw Error(ErrorCode::SchemaError, std::string("non-string sentence in '") + key + "'");
    out.push_back(s.get<std::string>());
  }
  if (out.empty()) throw Error(ErrorCode::EmptyDataset, std::string("'") + key + "' is empty");
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// CrowS

std::vector<SentencePair> parse_sentence_pairs(std::istream& in) {
  const auto rows = csv::parse(in);
  if (rows.empty()) throw Error(ErrorCode::EmptyDataset, "sentence-pair CSV is empty");
  const auto& header = rows.front();
  auto column = [&](std::string_view name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::SchemaError, "sentence-pair CSV lacks column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto cs = column("stereo");
  const auto ca = column("anti");
  const auto cc = column("category");
  std::vector<SentencePair> pairs;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) {
      throw Error(ErrorCode::SchemaError, "CSV row " + std::to_string(r) + " has " + std::to_string(row.size()) + " fields");
    }
    if (row[cs].empty() || row[ca].empty()) {
      throw Error(ErrorCode::EmptyInput, "CSV row " + std::to_string(r) + " has an empty sentence");
    }
    pairs.push_back({row[cs], row[ca], row[cc]});
  }
  return pairs;
}

std::vector<SentencePair> load_sentence_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return parse_sentence_pairs(in);
}

CrowsResult stereotype_score(std::vector<PairScore> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyDataset, "no sentence pairs");
  CrowsResult result;
  for (auto& p : pairs) {
    const double delta = p.pll_stereo - p.pll_anti;
    p.outcome = std::abs(delta) <= kTieTolerance ? 0 : (delta > 0 ? 1 : -1);
    if (p.outcome > 0) ++result.stereo_preferred;
    if (p.outcome == 0) ++result.ties;
  }
  result.score = 100.0 * (static_cast<double>(result.stereo_preferred) + 0.5 * static_cast<double>(result.ties)) /
                 static_cast<double>(pairs.size());
  result.pairs = std::move(pairs);
  return result;
}

CrowsResult crows_score(const std::vector<SentencePair>& pairs, const LanguageModel& lm) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyDataset, "no sentence pairs");
  std::vector<PairScore> scores(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t i) {
    try {
      const auto s = lm.tokenizer.encode(pairs[i].stereo);
      const auto a = lm.tokenizer.encode(pairs[i].anti);
      scores[i].pll_stereo = engine::pseudo_log_likelihood(s, lm.model, lm.tokenizer.mask_id());
      scores[i].pll_anti = engine::pseudo_log_likelihood(a, lm.model, lm.tokenizer.mask_id());
    } catch (const Error& e) {
      throw Error(e.code(), "sentence pair " + std::to_string(i) + ": " + e.what());
    }
  });
  return stereotype_score(std::move(scores));
}

// ---------------------------------------------------------------------------
// SEAT

Pooling default_pooling(engine::Family family) {
  return family == engine::Family::Bidirectional ? Pooling::First : Pooling::Last;
}

Pooling parse_pooling(std::string_view name) {
  if (name == "first") return Pooling::First;
  if (name == "last") return Pooling::Last;
  if (name == "mean") return Pooling::Mean;
  throw Error(ErrorCode::ConfigError, "pooling must be first|last|mean, got '" + std::string(name) + "'");
}

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::First: return "first";
    case Pooling::Last: return "last";
    case Pooling::Mean: return "mean";
  }
  return "first";
}

Vector embed_sentence(const std::string& sentence, const LanguageModel& lm, Pooling pooling) {
  const auto ids = lm.tokenizer.encode(sentence);
  if (ids.empty()) throw Error(ErrorCode::EmptyInput, "sentence '" + sentence + "' tokenizes to nothing");
  const auto trace = lm.model.forward_trace(ids);
  const auto& h = trace.final_hidden;
  switch (pooling) {
    case Pooling::First: return h.row(0).transpose();
    case Pooling::Last: return h.row(h.rows() - 1).transpose();
    case Pooling::Mean: return h.colwise().mean().transpose();
  }
  return h.row(0).transpose();
}

double association_score(const Vector& w, std::span<const Vector> A, std::span<const Vector> B) {
  if (A.empty() || B.empty()) throw Error(ErrorCode::EmptyDataset, "attribute sets must be non-empty");
  double sa = 0.0;
  for (const auto& a : A) sa += cosine(w, a);
  double sb = 0.0;
  for (const auto& b : B) sb += cosine(w, b);
  return sa / static_cast<double>(A.size()) - sb / static_cast<double>(B.size());
}

AssociationSets parse_association_sets(std::istream& in, std::string name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaError, std::string("association JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::SchemaError, "association file must be a JSON object");
  AssociationSets sets;
  sets.name = std::move(name);
  sets.X = sentence_list(j, "targ1");
  sets.Y = sentence_list(j, "targ2");
  sets.A = sentence_list(j, "attr1");
  sets.B = sentence_list(j, "attr2");
  return sets;
}

AssociationSets load_association_sets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  auto name = path.stem().string();
  if (auto dot = name.find(".jsonl"); dot != std::string::npos) name.resize(dot);
  return parse_association_sets(in, name);
}

EmbeddedSets embed_sets(const AssociationSets& sets, const LanguageModel& lm, Pooling pooling) {
  std::vector<const std::string*> all;
  for (const auto* group : {&sets.X, &sets.Y, &sets.A, &sets.B}) {
    if (group->empty()) throw Error(ErrorCode::EmptyDataset, "association set '" + sets.name + "' has an empty group");
    for (const auto& s : *group) all.push_back(&s);
  }
  std::vector<Vector> vecs(all.size());
  parallel_for(all.size(), [&](std::size_t i) { vecs[i] = embed_sentence(*all[i], lm, pooling); });

  EmbeddedSets out;
  auto it = vecs.begin();
  auto take = [&](std::size_t n, std::vector<Vector>& dst) {
    dst.assign(std::make_move_iterator(it), std::make_move_iterator(it + static_cast<std::ptrdiff_t>(n)));
    it += static_cast<std::ptrdiff_t>(n);
  };
  take(sets.X.size(), out.X);
  take(sets.Y.size(), out.Y);
  take(sets.A.size(), out.A);
  take(sets.B.size(), out.B);
  return out;
}

AssociationScores association_scores(const EmbeddedSets& sets) {
  if (sets.X.empty() || sets.Y.empty()) throw Error(ErrorCode::EmptyDataset, "target sets must be non-empty");
  AssociationScores s;
  for (const auto& x : sets.X) s.x.push_back(association_score(x, sets.A, sets.B));
  for (const auto& y : sets.Y) s.y.push_back(association_score(y, sets.A, sets.B));
  return s;
}

double effect_size(const AssociationScores& scores) {
  if (scores.x.empty() || scores.y.empty()) throw Error(ErrorCode::EmptyDataset, "target sets must be non-empty");
  std::vector<double> all(scores.x);
  all.insert(all.end(), scores.y.begin(), scores.y.end());
  const double mu = mean(all);
  double var = 0.0;
  double scale = 0.0;
  for (double v : all) {
    var += (v - mu) * (v - mu);
    scale = std::max(scale, std::abs(v));
  }
  const double sd = std::sqrt(var / static_cast<double>(all.size()));
  // Equal scores can leave rounding residue in the variance; treat it as zero.
  if (!(sd > 1e-12 * std::max(1.0, scale))) {
    throw Error(ErrorCode::ZeroVariance, "association scores have zero variance");
  }
  return (mean(scores.x) - mean(scores.y)) / sd;
}

double seat_effect_size(const EmbeddedSets& sets) { return effect_size(association_scores(sets)); }

double permutation_pvalue(const AssociationScores& scores, const PermutationMode& mode) {
  const std::size_t nx = scores.x.size();
  const std::size_t ny = scores.y.size();
  if (nx == 0 || ny == 0) throw Error(ErrorCode::EmptyDataset, "target sets must be non-empty");

  std::vector<double> all(scores.x);
  all.insert(all.end(), scores.y.begin(), scores.y.end());
  double total = 0.0;
  double magnitude = 0.0;
  for (double v : all) {
    total += v;
    magnitude += std::abs(v);
  }
  // statistic(X') = sum_{X'} s - sum_{Y'} s = 2 sum_{X'} s - total
  auto statistic = [&](auto first, auto last) {
    double sx = 0.0;
    for (auto i = first; i != last; ++i) sx += all[*i];
    return 2.0 * sx - total;
  };
  std::vector<std::size_t> identity(nx);
  std::iota(identity.begin(), identity.end(), 0);
  const double observed = statistic(identity.begin(), identity.end());
  const double threshold = observed - 1e-12 * (1.0 + magnitude);

  if (mode.kind == PermutationMode::Kind::Exact) {
    if (nx != ny) throw Error(ErrorCode::UnequalSets, "exact permutation test requires |X| = |Y|");
    const auto total_partitions = binomial(all.size(), nx);
    if (total_partitions > kMaxExactPartitions) {
      throw Error(ErrorCode::PermutationSpaceTooLarge,
                  "C(" + std::to_string(all.size()) + ", " + std::to_string(nx) + ") partitions; use sampled mode");
    }
    std::vector<std::size_t> idx = identity;
    std::uint64_t hits = 0;
    std::uint64_t seen = 0;
    const std::size_t n = all.size();
    while (true) {
      ++seen;
      if (statistic(idx.begin(), idx.end()) >= threshold) ++hits;
      // next k-combination of [0, n) in lexicographic order
      std::size_t k = nx;
      while (k > 0 && idx[k - 1] == n - nx + k - 1) --k;
      if (k == 0) break;
      ++idx[k - 1];
      for (std::size_t j = k; j < nx; ++j) idx[j] = idx[j - 1] + 1;
    }
    return static_cast<double>(hits) / static_cast<double>(seen);
  }

  if (mode.samples == 0) throw Error(ErrorCode::ConfigError, "sampled permutation test needs at least one draw");
  std::mt19937_64 gen(mode.seed);
  std::vector<std::size_t> perm(all.size());
  std::uint64_t hits = 1;  // the observed partition
  for (std::size_t s = 0; s < mode.samples; ++s) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[bounded(gen, i + 1)]);
    if (statistic(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nx)) >= threshold) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(mode.samples + 1);
}

double seat_pvalue(const EmbeddedSets& sets, const PermutationMode& mode) {
  return permutation_pvalue(association_scores(sets), mode);
}

SeatResult run_seat(const AssociationSets& sets, const LanguageModel& lm, Pooling pooling,
                    const PermutationMode& mode) {
  const auto embedded = embed_sets(sets, lm, pooling);
  SeatResult r;
  r.name = sets.name;
  r.scores = association_scores(embedded);
  r.effect_size = effect_size(r.scores);
  r.p_value = permutation_pvalue(r.scores, mode);
  return r;
}

}  // namespace medlab::metrics
