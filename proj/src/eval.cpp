#include "pdl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "pdl/decoder.hpp"
#include "pdl/errors.hpp"
#include "pdl/trainer.hpp"

namespace pdl {
namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void finish(F1Result& r) {
  if (r.gold == 0 && r.predicted == 0) {
    r.precision = r.recall = r.f1 = 100.0;
    return;
  }
  r.precision = r.predicted ? 100.0 * r.matched / r.predicted : 0.0;
  r.recall = r.gold ? 100.0 * r.matched / r.gold : 0.0;
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
}

}  // namespace

const char* tape_mode_name(TapeMode m) { return m == TapeMode::model_greedy ? "model-greedy" : "gold-oracle"; }

TapeMode parse_tape_mode(const std::string& s) {
  if (s == "model-greedy") return TapeMode::model_greedy;
  if (s == "gold-oracle") return TapeMode::gold_oracle;
  throw ConfigError("unknown tape mode \"" + s + "\" (expected model-greedy or gold-oracle)");
}

ClosingReport closing_accuracy(const PushdownModel& model, const std::vector<ClosingItem>& split, int num_types,
                               TapeMode mode, const std::string& task, SiblingBranching branching) {
  ClosingReport rep;
  rep.records.resize(split.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t i = 0; i < split.size(); ++i) {
    const ClosingItem& item = split[i];
    const std::vector<int> ids = dyck_ids(item.source, num_types);
    const std::vector<int> words(ids.begin(), ids.begin() + item.prefix_len);
    std::vector<double> lp;
    if (mode == TapeMode::model_greedy) {
      lp = greedy_prefix(model, words).next_log_probs;
    } else {
      const Sequence seq = dyck_sequence(item.source, num_types, branching);
      const std::vector<int> r(seq.r.begin(), seq.r.begin() + item.prefix_len + 1);
      lp = forced_prefix(model, words, r);
    }
    EvalRecord& rec = rep.records[i];
    rec.task = task;
    rec.prefix_len = item.prefix_len;
    rec.distance = item.distance;
    rec.depth = item.depth;
    rec.bucket = item.bucket;
    rec.gold_type = item.gold_type;
    int best = 0;
    for (int t = 0; t < num_types; ++t) {
      rec.candidate_logprobs.push_back(lp[static_cast<std::size_t>(close_id(t, num_types))]);
      if (rec.candidate_logprobs.back() > rec.candidate_logprobs[static_cast<std::size_t>(best)]) best = t;
    }
    rec.correct = best == item.gold_type;
  }
  for (const auto& rec : rep.records) {
    auto& b = rep.buckets[rec.bucket];
    ++b.total;
    ++rep.overall.total;
    if (rec.correct) {
      ++b.correct;
      ++rep.overall.correct;
    }
  }
  return rep;
}

std::string closing_csv(const ClosingReport& report, const std::string& task) {
  std::string out = "task,bucket,count,correct,accuracy\n";
  auto row = [&](const std::string& bucket, const BucketStats& s) {
    out += task + "," + bucket + "," + std::to_string(s.total) + "," + std::to_string(s.correct) + "," +
           fmt(s.accuracy()) + "\n";
  };
  for (const auto& [b, s] : report.buckets) row(std::to_string(b), s);
  row("all", report.overall);
  return out;
}

std::string closing_records_csv(const ClosingReport& report) {
  std::string out = "task,prefix_len,distance,depth,bucket,gold_type,correct";
  const std::size_t K = report.records.empty() ? 0 : report.records.front().candidate_logprobs.size();
  for (std::size_t t = 0; t < K; ++t) out += ",lp" + std::to_string(t);
  out += "\n";
  for (const auto& r : report.records) {
    out += r.task + "," + std::to_string(r.prefix_len) + "," + std::to_string(r.distance) + "," +
           std::to_string(r.depth) + "," + std::to_string(r.bucket) + "," + std::to_string(r.gold_type) + "," +
           (r.correct ? "1" : "0");
    for (double v : r.candidate_logprobs) out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

void F1Result::add(const F1Result& other) {
  matched += other.matched;
  gold += other.gold;
  predicted += other.predicted;
  finish(*this);
}

std::vector<std::pair<int, int>> eval_spans(const BinaryTree& tree) {
  std::vector<std::pair<int, int>> out;
  for (const auto& s : tree.spans())
    if (!(s.first == tree.first() && s.second == tree.last())) out.push_back(s);
  return out;
}

F1Result unlabeled_f1(const BinaryTree& pred, const BinaryTree& gold) {
  if (pred.first() != gold.first() || pred.last() != gold.last()) {
    throw DimensionError("unlabeled_f1: trees cover different leaves");
  }
  const auto p = eval_spans(pred), g = eval_spans(gold);
  const std::set<std::pair<int, int>> gs(g.begin(), g.end());
  F1Result r;
  r.gold = static_cast<int>(g.size());
  r.predicted = static_cast<int>(p.size());
  for (const auto& s : p) r.matched += gs.count(s) ? 1 : 0;
  finish(r);
  return r;
}

F1Result unlabeled_f1(const std::vector<BinaryTree>& pred, const std::vector<BinaryTree>& gold) {
  if (pred.size() != gold.size()) throw DimensionError("unlabeled_f1: corpus sizes differ");
  F1Result total;
  for (std::size_t i = 0; i < pred.size(); ++i) total.add(unlabeled_f1(pred[i], gold[i]));
  if (pred.empty()) finish(total);
  return total;
}

std::vector<PerplexityRow> perplexity_report(const std::vector<std::pair<std::string, const PushdownModel*>>& models,
                                             const std::vector<Sequence>& corpus, int batch_size) {
  std::vector<PerplexityRow> rows;
  for (const auto& [name, m] : models) {
    const ValidationResult v = validate(*m, corpus, batch_size);
    rows.push_back({name, v.tokens, v.nll, v.perplexity});
  }
  return rows;
}

std::string perplexity_csv(const std::vector<PerplexityRow>& rows) {
  std::string out = "model,tokens,nll,perplexity\n";
  for (const auto& r : rows) out += r.name + "," + std::to_string(r.tokens) + "," + fmt(r.nll) + "," + fmt(r.perplexity) + "\n";
  return out;
}

std::vector<AttentionProbe> dyck_attention_probes(const std::vector<ClosingItem>& items, int num_types,
                                                  SiblingBranching branching) {
  std::vector<AttentionProbe> out;
  for (const auto& item : items) {
    const Sequence full = dyck_sequence(item.source, num_types, branching);
    AttentionProbe p;
    p.seq.ids.assign(full.ids.begin(), full.ids.begin() + item.prefix_len + 1);
    p.seq.r.assign(full.r.begin(), full.r.begin() + item.prefix_len + 1);
    p.query = item.prefix_len;
    for (int j = 0; j < item.prefix_len; ++j)
      if (item.source.opens[static_cast<std::size_t>(j)] && item.source.matching[static_cast<std::size_t>(j)] >= item.prefix_len)
        p.targets.push_back(j + 1);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Head-averaged attention per layer, `[layers][T x T]`.
std::vector<std::vector<double>> layer_attention(const PushdownModel& model, const Sequence& seq) {
  std::vector<const Sequence*> one{&seq};
  BatchData bd = model.make_batch(one);
  ad::Graph g(false);
  std::vector<std::vector<double>> att;
  model.forward(g, bd.input, &att);
  const std::size_t T = bd.input.seq_len, H = static_cast<std::size_t>(model.config().heads);
  std::vector<std::vector<double>> out(att.size(), std::vector<double>(T * T, 0.0));
  for (std::size_t l = 0; l < att.size(); ++l) {
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T * T; ++i) out[l][i] += att[l][h * T * T + i];
    for (auto& v : out[l]) v /= static_cast<double>(H);
  }
  return out;
}

}  // namespace

AttentionReport attention_analysis(const PushdownModel& model, const std::vector<AttentionProbe>& probes) {
  AttentionReport rep;
  rep.layers = static_cast<std::size_t>(model.config().layers);
  rep.layer_target_mass.assign(rep.layers, 0.0);
  for (const auto& p : probes) {
    const auto att = layer_attention(model, p.seq);
    const std::size_t T = p.seq.ids.size();
    if (p.query < 0 || static_cast<std::size_t>(p.query) >= T) throw DimensionError("attention probe query out of range");
    const auto q = static_cast<std::size_t>(p.query);
    std::vector<std::vector<double>> rows(rep.layers);
    std::vector<double> mean(T, 0.0);
    for (std::size_t l = 0; l < rep.layers; ++l) {
      rows[l].assign(att[l].begin() + static_cast<std::ptrdiff_t>(q * T),
                     att[l].begin() + static_cast<std::ptrdiff_t>((q + 1) * T));
      double mass = 0.0;
      for (int t : p.targets) mass += rows[l][static_cast<std::size_t>(t)];
      rep.layer_target_mass[l] += mass;
      for (std::size_t j = 0; j < T; ++j) mean[j] += rows[l][j];
    }
    for (auto& v : mean) v /= static_cast<double>(rep.layers);
    rep.rows.push_back(std::move(rows));
    rep.mean_rows.push_back(std::move(mean));
  }
  if (!probes.empty()) {
    for (auto& m : rep.layer_target_mass) m /= static_cast<double>(probes.size());
    for (double m : rep.layer_target_mass) rep.target_mass += m;
    rep.target_mass /= static_cast<double>(rep.layers);
  }
  return rep;
}

std::vector<std::vector<double>> attention_matrix(const PushdownModel& model, const Sequence& seq) {
  const auto att = layer_attention(model, seq);
  const std::size_t T = seq.ids.size();
  std::vector<std::vector<double>> m(T, std::vector<double>(T, 0.0));
  for (const auto& layer : att)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) m[i][j] += layer[i * T + j];
  for (auto& row : m)
    for (auto& v : row) v /= static_cast<double>(att.size());
  return m;
}

std::string attention_rows_csv(const AttentionReport& report, std::size_t probe) {
  const auto& rows = report.rows.at(probe);
  const std::size_t T = report.mean_rows.at(probe).size();
  std::string out = "layer";
  for (std::size_t j = 0; j < T; ++j) out += ",pos" + std::to_string(j);
  out += "\n";
  for (std::size_t l = 0; l < rows.size(); ++l) {
    out += std::to_string(l);
    for (double v : rows[l]) out += "," + fmt(v);
    out += "\n";
  }
  out += "mean";
  for (double v : report.mean_rows[probe]) out += "," + fmt(v);
  out += "\n";
  return out;
}

std::string matrix_csv(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels) {
  std::string out = "query";
  for (const auto& l : labels) out += "," + l;
  out += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += i < labels.size() ? labels[i] : std::to_string(i);
    for (double v : m[i]) out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels) {
  const int n = static_cast<int>(m.size());
  const int cell = 16, margin = 48;
  const int size = margin + n * cell + 4;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
    << "\" font-family=\"monospace\" font-size=\"9\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int i = 0; i < n; ++i) {
    const std::string lab = xml_escape(i < static_cast<int>(labels.size()) ? labels[static_cast<std::size_t>(i)] : std::to_string(i));
    s << "<text x=\"" << margin - 4 << "\" y=\"" << margin + i * cell + cell - 4 << "\" text-anchor=\"end\">" << lab
      << "</text>\n";
    const int cx = margin + i * cell + cell / 2;
    s << "<text x=\"" << cx << "\" y=\"" << margin - 4 << "\" transform=\"rotate(-90 " << cx << " " << margin - 4
      << ")\">" << lab << "</text>\n";
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < static_cast<int>(m[static_cast<std::size_t>(i)].size()); ++j) {
      const double w = std::clamp(m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 0.0, 1.0);
      const int g = static_cast<int>(std::lround(255.0 * (1.0 - w)));
      s << "<rect x=\"" << margin + j * cell << "\" y=\"" << margin + i * cell << "\" width=\"" << cell
        << "\" height=\"" << cell << "\" fill=\"rgb(" << g << "," << g << "," << g << ")\"/>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace pdl
