// pdl: data generation, training, evaluation, parsing, scoring and attention
// analysis from one binary.
//
// Exit codes: 0 success, 1 unexpected failure, 2 usage or configuration,
// 3 missing or unwritable file, 4 checkpoint/cache format or version mismatch,
// 5 vocabulary mismatch, 6 malformed input data, 7 training diverged,
// 8 run directory locked.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pdl/binary_io.hpp"
#include "pdl/decoder.hpp"
#include "pdl/dyck.hpp"
#include "pdl/errors.hpp"
#include "pdl/eval.hpp"
#include "pdl/model.hpp"
#include "pdl/run_config.hpp"
#include "pdl/trainer.hpp"
#include "pdl/treebank.hpp"

namespace fs = std::filesystem;
using namespace pdl;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kFormat = 4, kVocab = 5, kInput = 6, kDiverged = 7, kLocked = 8 };

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got \"" + s + "\"");
    }
  }
  return out;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  io::write_file_atomic(path, text);
}

bool is_cache(const fs::path& p) { return p.extension() == ".pdlc"; }

/// Loads a corpus cache or a bracketed treebank. With `vocab`, the corpus
/// must use exactly that vocabulary.
Corpus load_any_corpus(const fs::path& path, const Vocab* vocab) {
  if (is_cache(path)) {
    Corpus c = load_corpus_cache(path);
    if (vocab && !(c.vocab == *vocab)) {
      throw VocabError(path.string() + ": corpus vocabulary (" + std::to_string(c.vocab.size()) +
                       " tokens) differs from the checkpoint vocabulary (" + std::to_string(vocab->size()) + ")");
    }
    return c;
  }
  return load_corpus(path, vocab ? VocabPolicy::frozen : VocabPolicy::build, vocab);
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

std::vector<int> to_ids(const Vocab& vocab, const std::vector<std::string>& toks, const std::string& where) {
  std::vector<int> ids;
  for (const auto& t : toks) {
    auto id = vocab.find(t);
    if (!id || *id == Vocab::kRoot || *id == Vocab::kEos) throw VocabError(where + ": token \"" + t + "\" not in vocabulary");
    ids.push_back(*id);
  }
  return ids;
}

std::string tree_text(const BinaryTree& tree, const Vocab& vocab, const std::vector<int>& words) {
  std::vector<std::string> toks;
  for (int w : words) toks.push_back(vocab.token(w));
  return to_bracketed(tree, toks);
}

// -- gen-data ---------------------------------------------------------------

struct GenArgs {
  std::string out = "data";
  int num_types = 8;
  int max_depth = 6;
  double open_prob = 0.49;
  int min_length = 4;
  int max_length = 128;
  std::uint64_t seed = 1;
  std::string branching = "left";
  std::size_t train = 20000;
  std::size_t val = 1000;
  std::size_t test = 1000;
  int depth_min = 8;
  int depth_max = 12;
  std::size_t depth_count = 1000;
  std::string longrange = "40";
  std::size_t longrange_count = 1000;
  int max_prefix_len = 0;        // 0 -> max_length - 1
  int longrange_max_length = 0;  // 0 -> max_length
};

int cmd_gen_data(const GenArgs& a) {
  DyckSpec spec;
  spec.num_types = a.num_types;
  spec.max_depth = a.max_depth;
  spec.open_prob = a.open_prob;
  spec.min_length = a.min_length;
  spec.max_length = a.max_length;
  spec.seed = a.seed;
  if (a.branching == "left") spec.branching = SiblingBranching::left;
  else if (a.branching == "right") spec.branching = SiblingBranching::right;
  else throw ConfigError("branching must be left or right");
  spec.validate();
  fs::create_directories(a.out);

  const Vocab vocab = dyck_vocab(a.num_types);
  std::unordered_set<std::uint64_t> seen;
  // manifest.jsonl: the generator settings, then one line per emitted file
  nlohmann::json head = {{"spec",
                          {{"num_types", a.num_types},
                           {"max_depth", a.max_depth},
                           {"open_prob", a.open_prob},
                           {"min_length", a.min_length},
                           {"max_length", a.max_length},
                           {"branching", a.branching}}},
                         {"seed", a.seed}};
  std::string manifest = head.dump() + "\n";
  auto emit = [&](const std::string& name, std::uint64_t shard, std::size_t count) {
    Corpus c;
    c.vocab = vocab;
    std::string text;
    for (const auto& s : sample_dyck(spec, count, shard)) {
      seen.insert(dyck_hash(s));
      Sequence seq = dyck_sequence(s, a.num_types, spec.branching);
      text += tree_text(gold_word_tree(seq), vocab, std::vector<int>(seq.ids.begin() + 1, seq.ids.end() - 1)) + "\n";
      c.sequences.push_back(std::move(seq));
    }
    save_corpus_cache(c, fs::path(a.out) / (name + ".pdlc"));
    io::write_file_atomic(fs::path(a.out) / (name + ".txt"), text);
    manifest += nlohmann::json{{"split", name}, {"files", {name + ".pdlc", name + ".txt"}}, {"count", count},
                               {"shard", shard}}
                    .dump() +
                "\n";
  };
  emit("train", 0, a.train);
  emit("val", 1, a.val);
  emit("test", 2, a.test);

  SplitOptions opt;
  opt.seed = a.seed * 1000003ull + 17;
  opt.min_length = a.min_length;
  opt.max_length = a.max_length;
  opt.open_prob = a.open_prob;
  opt.max_prefix_len = a.max_prefix_len > 0 ? a.max_prefix_len : a.max_length - 1;
  opt.exclude = &seen;
  if (a.depth_count > 0) {
    const auto items = build_depth_gen_split(spec, a.depth_min, a.depth_max, a.depth_count, opt);
    io::write_file_atomic(fs::path(a.out) / "depth_gen.split", format_split(items, a.num_types));
    manifest += nlohmann::json{{"split", "depth_gen"},
                               {"files", {"depth_gen.split"}},
                               {"count", items.size()},
                               {"depth_min", a.depth_min},
                               {"depth_max", a.depth_max},
                               {"max_length", opt.max_length}}
                    .dump() +
                "\n";
  }
  if (a.longrange_count > 0) {
    opt.seed += 1;
    if (a.longrange_max_length > 0) {
      opt.max_length = a.longrange_max_length;
      if (a.max_prefix_len == 0) opt.max_prefix_len = a.longrange_max_length - 1;
    }
    const auto targets = parse_int_list(a.longrange);
    const auto items = build_longrange_split(spec, targets, a.longrange_count, opt);
    io::write_file_atomic(fs::path(a.out) / "longrange.split", format_split(items, a.num_types));
    manifest += nlohmann::json{{"split", "longrange"},
                               {"files", {"longrange.split"}},
                               {"count", items.size()},
                               {"distances", targets},
                               {"slack", opt.slack},
                               {"max_length", opt.max_length}}
                    .dump() +
                "\n";
  }
  io::write_file_atomic(fs::path(a.out) / "manifest.jsonl", manifest);
  std::cerr << "wrote " << a.out << "\n";
  return kOk;
}

// -- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  KeyValues flags;
};

int cmd_train(const TrainArgs& a) {
  KeyValues overrides = a.flags;
  for (const auto& s : a.sets) {
    auto [k, v] = parse_assignment(s);
    overrides[k] = v;
  }
  std::optional<fs::path> file;
  if (!a.config.empty()) file = a.config;
  RunConfig rc = load_run_config(file, overrides);
  if (rc.train_data.empty() || rc.val_data.empty()) throw ConfigError("train_data and val_data are required");

  Corpus train = load_any_corpus(rc.train_data, nullptr);
  Corpus val = load_any_corpus(rc.val_data, &train.vocab);
  if (rc.model.vocab != 0 && rc.model.vocab != train.vocab.size()) {
    throw VocabError("config vocab " + std::to_string(rc.model.vocab) + " differs from corpus vocabulary size " +
                     std::to_string(train.vocab.size()));
  }
  rc.model.vocab = train.vocab.size();
  rc.model.validate();

  RunDirectory dir = a.out.empty() ? RunDirectory::create(rc.run_root, rc.hash()) : [&] {
    fs::create_directories(a.out);
    return RunDirectory::open(a.out);
  }();
  io::write_file_atomic(dir.path() / "config.txt", format_kv(rc.to_kv()));
  std::cerr << "run directory " << dir.path().string() << "\n";

  PushdownModel model(rc.model);
  TrainOutputs outs;
  outs.dir = dir.path();
  outs.vocab = &train.vocab;
  outs.on_eval = [](const MetricsRow& r) { std::cerr << format_metrics(r); };
  const TrainResult res = pdl::train(model, train.sequences, val.sequences, rc.train, outs);
  std::cout << "best_step=" << res.best_step << " best_val_ppl=" << res.best_ppl << " run=" << dir.path().string()
            << "\n";
  return kOk;
}

// -- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string split;
  std::string task = "ppl";
  std::string tape_mode = "model-greedy";
  int beam = 32;
  std::string out;
  std::string records;
};

int cmd_eval(const EvalArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  if (a.task == "ppl") {
    Corpus c = load_any_corpus(a.split, &lm.vocab);
    write_output(a.out, perplexity_csv(perplexity_report({{fs::path(a.checkpoint).stem().string(), &lm.model}}, c.sequences)));
  } else if (a.task == "f1") {
    Corpus c = load_any_corpus(a.split, &lm.vocab);
    BeamConfig bc;
    bc.width = a.beam;
    bc.mode = DecodeMode::parse;
    std::vector<BinaryTree> pred(c.sequences.size()), gold(c.sequences.size());
#pragma omp parallel for schedule(dynamic, 1)
    for (std::size_t i = 0; i < c.sequences.size(); ++i) {
      const auto& s = c.sequences[i];
      const std::vector<int> words(s.ids.begin() + 1, s.ids.end() - 1);
      pred[i] = best_parse(lm.model, words, bc).tree;
      gold[i] = gold_word_tree(s);
    }
    const F1Result f = unlabeled_f1(pred, gold);
    char buf[256];
    std::snprintf(buf, sizeof buf, "sentences,matched,gold,predicted,precision,recall,f1\n%zu,%d,%d,%d,%.6f,%.6f,%.6f\n",
                  c.sequences.size(), f.matched, f.gold, f.predicted, f.precision, f.recall, f.f1);
    write_output(a.out, buf);
  } else if (a.task == "closing") {
    int K = 0;
    const auto items = parse_split(io::read_file(a.split), K, a.split);
    if (!(lm.vocab == dyck_vocab(K))) {
      throw VocabError("checkpoint vocabulary is not the Dyck vocabulary with " + std::to_string(K) + " types");
    }
    const TapeMode mode = parse_tape_mode(a.tape_mode);
    const std::string task = fs::path(a.split).stem().string();
    const ClosingReport rep = closing_accuracy(lm.model, items, K, mode, task);
    write_output(a.out, closing_csv(rep, task));
    if (!a.records.empty()) io::write_file_atomic(a.records, closing_records_csv(rep));
  } else {
    throw ConfigError("unknown eval task \"" + a.task + "\" (expected closing, f1 or ppl)");
  }
  return kOk;
}

// -- parse / score ----------------------------------------------------------

struct DecodeArgs {
  std::string checkpoint;
  std::string input;
  int beam = 32;
  std::string mode = "marginal";
  std::string out;
};

int cmd_parse(const DecodeArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  BeamConfig bc;
  bc.width = a.beam;
  bc.mode = DecodeMode::parse;
  bc.validate();
  const auto lines = io::read_lines(a.input);
  std::vector<std::vector<int>> inputs;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto toks = split_ws(lines[i]);
    if (toks.empty()) continue;
    inputs.push_back(to_ids(lm.vocab, toks, a.input + ":" + std::to_string(i + 1)));
  }
  std::vector<std::string> out(inputs.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out[i] = tree_text(best_parse(lm.model, inputs[i], bc).tree, lm.vocab, inputs[i]);
  std::string text;
  for (const auto& s : out) text += s + "\n";
  write_output(a.out, text);
  return kOk;
}

int cmd_score(const DecodeArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  BeamConfig bc;
  bc.width = a.beam;
  bc.validate();
  const auto lines = io::read_lines(a.input);
  std::string text;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = a.input + ":" + std::to_string(i + 1);
    if (split_ws(lines[i]).empty()) continue;
    nlohmann::json j;
    std::vector<int> words;
    if (a.mode == "joint") {
      ParseTree t;
      try {
        t = parse_sexpr(lines[i]);
      } catch (const ParseError& e) {
        throw ParseError(where + ": " + e.what(), e.offset());
      }
      words = to_ids(lm.vocab, leaves(t), where);
      j["tokens"] = leaves(t);
      j["logprob"] = score_joint(lm.model, words, binarize(t));
    } else {
      const auto toks = split_ws(lines[i]);
      words = to_ids(lm.vocab, toks, where);
      j["tokens"] = toks;
      if (a.mode == "marginal") {
        bc.mode = DecodeMode::score;
        j["logprob"] = marginal_logprob(lm.model, words, bc);
      } else if (a.mode == "surprisal") {
        bc.mode = DecodeMode::surprisal;
        j["surprisals"] = surprisal(lm.model, words, bc);
      } else {
        throw ConfigError("unknown score mode \"" + a.mode + "\" (expected joint, marginal or surprisal)");
      }
    }
    j["beam_width"] = a.mode == "joint" ? 0 : a.beam;
    text += j.dump() + "\n";
  }
  write_output(a.out, text);
  return kOk;
}

// -- analyze-attention --------------------------------------------------------

struct AttentionArgs {
  std::string checkpoint;
  std::string probes;
  std::string out_dir = "attention";
  std::size_t probe_index = 0;
};

int cmd_analyze_attention(const AttentionArgs& a) {
  LoadedModel lm = load_checkpoint(a.checkpoint);
  int K = 0;
  const auto items = parse_split(io::read_file(a.probes), K, a.probes);
  if (!(lm.vocab == dyck_vocab(K))) {
    throw VocabError("checkpoint vocabulary is not the Dyck vocabulary with " + std::to_string(K) + " types");
  }
  const auto probes = dyck_attention_probes(items, K);
  if (probes.empty()) throw ConfigError("probe file has no items");
  if (a.probe_index >= probes.size()) throw ConfigError("probe index out of range");
  const AttentionReport rep = attention_analysis(lm.model, probes);
  fs::create_directories(a.out_dir);
  std::string summary = "layer,target_mass\n";
  for (std::size_t l = 0; l < rep.layer_target_mass.size(); ++l)
    summary += std::to_string(l) + "," + std::to_string(rep.layer_target_mass[l]) + "\n";
  summary += "mean," + std::to_string(rep.target_mass) + "\n";
  io::write_file_atomic(fs::path(a.out_dir) / "summary.csv", summary);
  io::write_file_atomic(fs::path(a.out_dir) / "query_rows.csv", attention_rows_csv(rep, a.probe_index));
  const Sequence& seq = probes[a.probe_index].seq;
  std::vector<std::string> labels;
  for (int id : seq.ids) labels.push_back(lm.vocab.token(id));
  const auto m = attention_matrix(lm.model, seq);
  io::write_file_atomic(fs::path(a.out_dir) / "matrix.csv", matrix_csv(m, labels));
  io::write_file_atomic(fs::path(a.out_dir) / "heatmap.svg", heatmap_svg(m, labels));
  std::cout << "mean target attention mass " << rep.target_mass << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pushdown-layer language models: data, training, evaluation and decoding"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Sample Dyck corpora and closing-bracket test splits");
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--num-types", gen.num_types, "Bracket types");
  g->add_option("--max-depth", gen.max_depth, "Maximum nesting depth of training strings");
  g->add_option("--open-prob", gen.open_prob, "Probability of opening when both moves are allowed");
  g->add_option("--min-length", gen.min_length);
  g->add_option("--max-length", gen.max_length);
  g->add_option("--seed", gen.seed);
  g->add_option("--branching", gen.branching, "Sibling binarization: left or right");
  g->add_option("--train", gen.train, "Training strings");
  g->add_option("--val", gen.val, "Validation strings");
  g->add_option("--test", gen.test, "In-distribution test strings");
  g->add_option("--depth-min", gen.depth_min);
  g->add_option("--depth-max", gen.depth_max);
  g->add_option("--depth-count", gen.depth_count, "Depth-generalization items (0 skips)");
  g->add_option("--longrange", gen.longrange, "Comma-separated minimum distances");
  g->add_option("--longrange-count", gen.longrange_count, "Items per distance (0 skips)");
  g->add_option("--max-prefix-len", gen.max_prefix_len);
  g->add_option("--longrange-max-length", gen.longrange_max_length,
                "Length bound of the strings long-range items are mined from (default: --max-length)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; writes a run directory");
  t->add_option("--config", tr.config, "Key-value config file");
  t->add_option("--set", tr.sets, "key=value override (repeatable)");
  t->add_option("--out", tr.out, "Run directory (default: <run_root>/<time>-<hash>)");
  std::map<std::string, std::string> flag_values;
  for (const auto& [k, v] : RunConfig{}.to_kv()) {
    t->add_option("--" + k, flag_values[k], "config key " + k);
  }

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--split", ev.split, "Corpus (.pdlc or treebank) or closing split file")->required();
  e->add_option("--task", ev.task, "closing, f1 or ppl");
  e->add_option("--tape-mode", ev.tape_mode, "model-greedy or gold-oracle (closing)");
  e->add_option("--beam", ev.beam, "Beam width (f1)");
  e->add_option("--out", ev.out, "Report CSV (default stdout)");
  e->add_option("--records", ev.records, "Per-item CSV (closing)");

  DecodeArgs pa;
  auto* p = app.add_subcommand("parse", "Best parse of each input line");
  p->add_option("--checkpoint", pa.checkpoint)->required();
  p->add_option("--input", pa.input, "One whitespace-tokenized sentence per line")->required();
  p->add_option("--beam", pa.beam);
  p->add_option("--out", pa.out);

  DecodeArgs sc;
  auto* s = app.add_subcommand("score", "Joint, marginal or per-token scores as JSON lines");
  s->add_option("--checkpoint", sc.checkpoint)->required();
  s->add_option("--input", sc.input, "Sentences (bracketed trees in joint mode)")->required();
  s->add_option("--beam", sc.beam);
  s->add_option("--mode", sc.mode, "joint, marginal or surprisal");
  s->add_option("--out", sc.out);

  AttentionArgs at;
  auto* an = app.add_subcommand("analyze-attention", "Attention on unmatched open brackets");
  an->add_option("--checkpoint", at.checkpoint)->required();
  an->add_option("--probes", at.probes, "Closing split file")->required();
  an->add_option("--out-dir", at.out_dir);
  an->add_option("--probe-index", at.probe_index, "Probe drawn as heatmap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) {
      for (const auto& [k, v] : flag_values)
        if (t->count("--" + k)) tr.flags[k] = v;
      return cmd_train(tr);
    }
    if (e->parsed()) return cmd_eval(ev);
    if (p->parsed()) return cmd_parse(pa);
    if (s->parsed()) return cmd_score(sc);
    if (an->parsed()) return cmd_analyze_attention(at);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const IoError& err) {
    std::cerr << "file error: " << err.what() << "\n";
    return kIo;
  } catch (const FormatError& err) {
    std::cerr << "format error: " << err.what() << "\n";
    return kFormat;
  } catch (const VocabError& err) {
    std::cerr << "vocabulary error: " << err.what() << "\n";
    return kVocab;
  } catch (const ParseError& err) {
    std::cerr << "input error: " << err.what() << "\n";
    return kInput;
  } catch (const SupervisionError& err) {
    std::cerr << "input error: " << err.what() << "\n";
    return kInput;
  } catch (const TrainingError& err) {
    std::cerr << "training error: " << err.what() << "\n";
    return kDiverged;
  } catch (const LockError& err) {
    std::cerr << "lock error: " << err.what() << "\n";
    return kLocked;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
