// Writes the tiny fixture tree (models, vocabulary, datasets, configs) used by
// the tests and examples. Output is byte-deterministic; --check compares a
// fresh rendering against an existing tree instead of writing.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "medlab/engine.hpp"
#include "medlab/tensor_store.hpp"

namespace {

using medlab::engine::Family;
using medlab::engine::ModelConfig;

const std::vector<std::string> kTemplates = {
    "The [subject] said that",
    "The [subject] yelled that",
    "The [subject] whispered because",
    "The [subject] cried because",
};

const std::vector<std::pair<std::string, std::string>> kProfessions = {
    {"nurse", "female"},    {"secretary", "female"}, {"dancer", "female"},  {"housekeeper", "female"},
    {"librarian", "female"}, {"engineer", "male"},    {"carpenter", "male"}, {"mechanic", "male"},
    {"farmer", "male"},     {"surgeon", "male"},
};

const std::vector<std::string> kContinuations = {
    "the mechanic called the nurse because he|charged a lot|is grateful|she",
    "the surgeon thanked the secretary because she|is grateful|charged a lot|he",
    "the farmer paid the housekeeper because he|was late|was early|she",
    "the librarian helped the carpenter because she|was tired|was happy|he",
    "the engineer greeted the dancer because he|was happy|was tired|she",
    "the pilot asked the receptionist because she|is grateful|was late|he",
};

struct CrowsRow {
  std::string stereo, anti, category;
};

const std::vector<CrowsRow> kCrows = {
    {"the nurse said that she was tired", "the nurse said that he was tired", "gender"},
    {"the engineer said that he was happy", "the engineer said that she was happy", "gender"},
    {"his career is in science", "her career is in science", "gender"},
    {"she stayed home with the children", "he stayed home with the children", "gender"},
    {"the woman is bad at math", "the man is bad at math", "gender"},
    {"the king paid the money", "the queen paid the money", "gender"},
    {"the mother is at home", "the father is at home", "gender"},
    {"the boy is good at math", "the girl is good at math", "gender"},
};

struct SeatFile {
  std::string name;
  std::vector<std::string> x, y, a, b;
  bool object_form = false;
};

const std::vector<SeatFile> kSeat = {
    {"career_family",
     {"he is here", "this is a man", "this is a boy", "the father is here"},
     {"she is here", "this is a woman", "this is a girl", "the mother is here"},
     {"this is a career", "the office is here", "the salary is here", "this is work"},
     {"this is a family", "the home is here", "the children are here", "this is a family home"},
     false},
    {"math_arts",
     {"this is math", "this is science", "math is work", "science is work"},
     {"this is art", "this is poetry", "art is work", "poetry is work"},
     {"he is here", "this is a man", "the son is here", "the brother is here"},
     {"she is here", "this is a woman", "the daughter is here", "the sister is here"},
     true},
};

const std::vector<std::pair<std::string, std::string>> kLexicon = {
    {"he", "she"},        {"his", "her"},      {"himself", "herself"}, {"man", "woman"},
    {"men", "women"},     {"boy", "girl"},     {"father", "mother"},   {"son", "daughter"},
    {"king", "queen"},    {"brother", "sister"}, {"mr", "mrs"},
};

const char* const kCorpus =
    "Her most significant piece of work was translated into six languages.\n"
    "The mother of the bride thanked her brother.\n"
    "HE SAID THAT SHE WOULD COME BACK.\n"
    "She's the king of the castle, and he is the queen's guard.\n"
    "No gendered words appear in this line.\n"
    "Mr. Smith met Mrs. Jones at the caf\xc3\xa9 with his son.\n"
    "Otherwise   spaced\ttext\twith tabs; punctuation!? and numbers 1999.\n"
    "A mixed-case hE stays lowercase in the swap.\n"
    "The brotherhood, motherland and himself should be handled word by word.\n"
    "Women and men, boys and girls.\n";

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string json_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string json_list(const std::vector<std::string>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + json_string(v[i]);
  return out + "]";
}

void add_words(std::set<std::string>& words, const std::string& text) {
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (w != "[subject]") words.insert(w);
  }
}

std::vector<std::string> vocabulary() {
  std::set<std::string> words;
  for (const auto& t : kTemplates) add_words(words, t);
  for (const auto& [w, g] : kProfessions) add_words(words, w);
  for (const auto* w : {"man", "woman", "he", "she"}) add_words(words, w);
  for (auto line : kContinuations) {
    for (char& c : line) {
      if (c == '|') c = ' ';
    }
    add_words(words, line);
  }
  for (const auto& r : kCrows) {
    add_words(words, r.stereo);
    add_words(words, r.anti);
  }
  for (const auto& s : kSeat) {
    for (const auto* group : {&s.x, &s.y, &s.a, &s.b}) {
      for (const auto& sentence : *group) add_words(words, sentence);
    }
  }
  std::vector<std::string> vocab = {"[UNK]", "[MASK]"};
  vocab.insert(vocab.end(), words.begin(), words.end());
  return vocab;
}

// Uniform in [-1, 1) from the top 53 bits of the generator.
double symmetric_unit(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-52 - 1.0;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string archive_bytes(const ModelConfig& config, std::uint64_t seed, bool zero) {
  std::mt19937_64 gen(seed);
  medlab::store::TensorArchive archive;
  for (const auto& [name, dims] : medlab::engine::expected_tensors(config)) {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    std::vector<float> data(n);
    const bool gamma = ends_with(name, ".gamma");
    double scale = 0.1;
    if (name == "tok_emb" || name == "pos_emb" || name == "lm_head.weight") {
      scale = 0.8;
    } else if (ends_with(name, ".weight")) {
      scale = 1.5 / std::sqrt(static_cast<double>(dims[1]));
    }
    for (auto& v : data) {
      if (zero) {
        v = gamma ? 1.0f : 0.0f;
      } else {
        const double u = symmetric_unit(gen);
        v = static_cast<float>(gamma ? 1.0 + 0.1 * u : scale * u);
      }
    }
    archive.add({name, dims, std::move(data)});
  }
  std::ostringstream out;
  medlab::store::write_archive(archive, out);
  return out.str();
}

std::string model_config_text(const ModelConfig& c) { return c.to_json().dump(2) + "\n"; }

std::string model_json(const std::string& dir) {
  return "  \"model\": {\n"
         "    \"archive\": \"../" + dir + "/weights.mlab\",\n"
         "    \"config\": \"../" + dir + "/model.json\",\n"
         "    \"tokenizer\": {\"type\": \"vocab\", \"vocab\": \"../vocab.txt\"}\n"
         "  },\n";
}

std::map<std::string, std::string> render() {
  std::map<std::string, std::string> files;

  const auto vocab = vocabulary();
  std::string vocab_text = "#vocab casing=uncased unk=[UNK] mask=[MASK]\n";
  for (const auto& w : vocab) vocab_text += w + "\n";
  files["vocab.txt"] = vocab_text;

  ModelConfig causal;
  causal.family = Family::Causal;
  causal.n_layers = 2;
  causal.n_heads = 4;
  causal.d_model = 16;
  causal.d_ff = 32;
  causal.vocab_size = static_cast<int>(vocab.size());
  causal.max_seq = 16;
  ModelConfig bidir = causal;
  bidir.family = Family::Bidirectional;
  bidir.norm_style = medlab::engine::NormStyle::Post;
  bidir.tied_embeddings = false;
  ModelConfig uniform = bidir;

  files["causal/model.json"] = model_config_text(causal);
  files["causal/weights.mlab"] = archive_bytes(causal, 20240601, false);
  files["bidirectional/model.json"] = model_config_text(bidir);
  files["bidirectional/weights.mlab"] = archive_bytes(bidir, 20240602, false);
  files["uniform/model.json"] = model_config_text(uniform);
  files["uniform/weights.mlab"] = archive_bytes(uniform, 0, true);

  std::string templates;
  for (const auto& t : kTemplates) templates += t + "\n";
  files["data/templates.txt"] = templates;

  std::string professions;
  for (const auto& [w, g] : kProfessions) professions += w + "," + g + "\n";
  files["data/professions.csv"] = professions;

  std::string wino;
  for (const auto& line : kContinuations) wino += line + "\n";
  files["data/winobias.txt"] = wino;

  std::string crows = "stereo,anti,category\n";
  for (const auto& r : kCrows) crows += csv_field(r.stereo) + "," + csv_field(r.anti) + "," + csv_field(r.category) + "\n";
  files["data/crows.csv"] = crows;

  for (const auto& s : kSeat) {
    auto group = [&](const char* key, const std::vector<std::string>& v, const char* category) {
      if (s.object_form) {
        return std::string("  \"") + key + "\": {\"category\": \"" + category + "\", \"examples\": " + json_list(v) + "}";
      }
      return std::string("  \"") + key + "\": " + json_list(v);
    };
    files["data/seat/" + s.name + ".json"] = "{\n" + group("targ1", s.x, "target-1") + ",\n" +
                                             group("targ2", s.y, "target-2") + ",\n" +
                                             group("attr1", s.a, "attribute-1") + ",\n" +
                                             group("attr2", s.b, "attribute-2") + "\n}\n";
  }

  std::string lexicon = "# gendered word pairs, one per line\n";
  for (const auto& [a, b] : kLexicon) lexicon += a + "\t" + b + "\n";
  files["data/lexicon.tsv"] = lexicon;
  files["data/corpus.txt"] = kCorpus;

  files["configs/neuron_mediation.json"] =
      "{\n  \"kind\": \"neuron-mediation\",\n" + model_json("causal") +
      "  \"data\": {\"professions\": \"../data/professions.csv\", \"templates\": \"../data/templates.txt\"},\n"
      "  \"params\": {\"top_fraction\": 0.025},\n"
      "  \"output_dir\": \"../out/neuron_mediation\"\n}\n";
  files["configs/attention_mediation.json"] =
      "{\n  \"kind\": \"attention-mediation\",\n" + model_json("causal") +
      "  \"data\": {\"winobias\": \"../data/winobias.txt\"},\n"
      "  \"params\": {\"top_heads\": 3},\n"
      "  \"output_dir\": \"../out/attention_mediation\"\n}\n";
  files["configs/crows.json"] =
      "{\n  \"kind\": \"crows\",\n" + model_json("bidirectional") +
      "  \"data\": {\"crows\": \"../data/crows.csv\"},\n"
      "  \"output_dir\": \"../out/crows\"\n}\n";
  files["configs/crows_uniform.json"] =
      "{\n  \"kind\": \"crows\",\n" + model_json("uniform") +
      "  \"data\": {\"crows\": \"../data/crows.csv\"},\n"
      "  \"output_dir\": \"../out/crows_uniform\"\n}\n";
  files["configs/seat.json"] =
      "{\n  \"kind\": \"seat\",\n" + model_json("bidirectional") +
      "  \"data\": {\"seat\": [\"../data/seat/career_family.json\", \"../data/seat/math_arts.json\"]},\n"
      "  \"params\": {\"pooling\": \"first\", \"permutation\": {\"mode\": \"exact\"}},\n"
      "  \"output_dir\": \"../out/seat\"\n}\n";
  files["configs/seat_sampled.json"] =
      "{\n  \"kind\": \"seat\",\n" + model_json("bidirectional") +
      "  \"data\": {\"seat\": [\"../data/seat/career_family.json\"]},\n"
      "  \"params\": {\"pooling\": \"mean\", \"permutation\": {\"mode\": \"sampled\", \"n\": 2000, \"seed\": 7}},\n"
      "  \"output_dir\": \"../out/seat_sampled\"\n}\n";
  files["configs/cda.json"] =
      "{\n  \"kind\": \"cda\",\n"
      "  \"data\": {\"corpus\": \"../data/corpus.txt\", \"lexicon\": \"../data/lexicon.tsv\"},\n"
      "  \"params\": {\"cda_mode\": \"two-sided\"},\n"
      "  \"output_dir\": \"../out/cda\"\n}\n";
  return files;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"make_fixtures: render the tiny fixture tree"};
  std::string out_dir;
  bool check = false;
  app.add_option("--out", out_dir, "Fixture root (e.g. fixtures/tiny)")->required();
  app.add_flag("--check", check, "Compare against the existing tree instead of writing");
  CLI11_PARSE(app, argc, argv);

  const auto files = render();
  const std::filesystem::path root(out_dir);
  int mismatches = 0;
  for (const auto& [rel, bytes] : files) {
    const auto path = root / rel;
    if (check) {
      if (!std::filesystem::exists(path) || read_file(path) != bytes) {
        std::fprintf(stderr, "differs: %s\n", path.string().c_str());
        ++mismatches;
      }
      continue;
    }
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
    if (!out) {
      std::fprintf(stderr, "cannot write %s\n", path.string().c_str());
      return 1;
    }
  }
  std::printf("%zu fixture files %s\n", files.size(), check ? (mismatches ? "checked, some differ" : "match") : "written");
  return mismatches ? 1 : 0;
}
