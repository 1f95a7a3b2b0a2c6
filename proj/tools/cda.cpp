#include <cstdio>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "medlab/cda.hpp"
#include "medlab/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"cda: swap gendered word pairs in a text corpus"};
  std::string lexicon_path, mode_name = "two-sided", in_path, out_path, stats_path;
  app.add_option("--lexicon", lexicon_path, "word_a<TAB>word_b pairs")->required();
  app.add_option("--mode", mode_name, "two-sided|replace")->check(CLI::IsMember({"two-sided", "replace"}));
  app.add_option("--in", in_path, "Input corpus")->required();
  app.add_option("--out", out_path, "Output corpus")->required();
  app.add_option("--stats", stats_path, "Stats JSON output");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const auto lexicon = medlab::cda::WordPairLexicon::load(lexicon_path);
    std::ifstream in(in_path, std::ios::binary);
    if (!in) throw medlab::Error(medlab::ErrorCode::IoError, "cannot open " + in_path);
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw medlab::Error(medlab::ErrorCode::IoError, "cannot write " + out_path);
    const auto stats = medlab::cda::augment_corpus(in, out, lexicon, medlab::cda::parse_mode(mode_name));
    if (!stats_path.empty()) {
      std::ofstream s(stats_path, std::ios::binary | std::ios::trunc);
      s << stats.to_json();
      if (!s) throw medlab::Error(medlab::ErrorCode::IoError, "write failed: " + stats_path);
    }
    std::fprintf(stderr, "cda: %zu lines read, %zu swapped, %zu written\n", stats.lines_read, stats.lines_swapped,
                 stats.lines_written);
  } catch (const medlab::Error& e) {
    std::fprintf(stderr, "cda: %s\n", e.what());
    return e.code() == medlab::ErrorCode::InvalidLexicon ? 2 : 1;
  }
  return 0;
}
