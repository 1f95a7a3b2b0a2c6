#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "medlab/engine.hpp"
#include "medlab/tensor_store.hpp"
#include "medlab/text.hpp"

namespace testutil {

inline std::filesystem::path fixture_dir() { return MEDLAB_FIXTURE_DIR; }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, const std::string& s) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("medlab_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline medlab::engine::ModelConfig small_config(medlab::engine::Family family, int layers, int heads, int d, int vocab,
                                                int max_seq = 12) {
  medlab::engine::ModelConfig c;
  c.family = family;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  return c;
}

// Random weights of moderate scale; gammas near 1.
inline medlab::store::TensorArchive random_archive(const medlab::engine::ModelConfig& c, std::uint64_t seed,
                                                   double scale = 0.6) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  medlab::store::TensorArchive a;
  for (const auto& [name, dims] : medlab::engine::expected_tensors(c)) {
    std::uint64_t n = 1;
    for (auto x : dims) n *= x;
    std::vector<float> data(n);
    const bool gamma = name.size() > 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    for (auto& v : data) v = static_cast<float>(gamma ? 1.0 + 0.2 * u(gen) : scale * u(gen));
    a.add({name, dims, std::move(data)});
  }
  return a;
}

inline medlab::text::VocabTokenizer word_tokenizer(std::vector<std::string> words, bool with_mask = false) {
  medlab::text::Vocab::SpecialNames specials;
  specials.unk = "[UNK]";
  words.insert(words.begin(), "[UNK]");
  if (with_mask) {
    specials.mask = "[MASK]";
    words.insert(words.begin() + 1, "[MASK]");
  }
  return medlab::text::VocabTokenizer(medlab::text::Vocab(std::move(words), true, specials));
}

inline double max_abs_diff(const medlab::engine::Matrix& a, const std::vector<std::vector<double>>& b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      m = std::max(m, std::abs(a(i, j) - b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
    }
  }
  return m;
}

}  // namespace testutil
