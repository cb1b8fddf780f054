#include "faircl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "faircl/error.hpp"
#include "faircl/kernels.hpp"
#include "faircl/rng.hpp"

namespace faircl::eval {

EditCounts edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1] ? 1 : 0);
      at(i, j) = std::min({diag, at(i, j - 1) + 1, at(i - 1, j) + 1});
    }
  }
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool differ = ref[i - 1] != hyp[j - 1];
      if (at(i, j) == at(i - 1, j - 1) + (differ ? 1 : 0)) {
        c.substitutions += differ;
        --i;
        --j;
        continue;
      }
    }
    if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++c.insertions;
      --j;
    } else {
      ++c.deletions;
      --i;
    }
  }
  return c;
}

double wer(const std::vector<ScoredPair>& pairs) {
  std::size_t errors = 0, words = 0;
  for (const auto& p : pairs) {
    errors += edit_distance(p.ref, p.hyp).total();
    words += p.ref.size();
  }
  if (words == 0) throw ConfigError("wer: reference transcripts contain no words");
  return static_cast<double>(errors) / static_cast<double>(words);
}

double wer_gap(const std::map<std::string, double>& cohort_wers) {
  if (cohort_wers.size() < 2) throw ConfigError("wer_gap: need at least 2 cohorts");
  double lo = cohort_wers.begin()->second, hi = lo;
  for (const auto& [_, w] : cohort_wers) {
    if (!(w >= 0.0)) throw ConfigError("wer_gap: WER must be finite and >= 0");
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  if (hi == 0.0) return 0.0;
  return 100.0 * (hi - lo) / hi;
}

Tokens greedy_ctc_decode(std::span<const double> log_probs, std::size_t frames, std::size_t vocab, int blank) {
  Tokens out;
  int prev = -1;
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = log_probs.data() + t * vocab;
    const int best = static_cast<int>(std::max_element(row, row + vocab) - row);
    if (best != blank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

Tokens greedy_ctc_decode(const ag::Tensor& log_probs, int blank) {
  if (log_probs.rank() != 2) throw ShapeError("greedy_ctc_decode: expected [T, V], got " + ag::shape_str(log_probs.shape()));
  return greedy_ctc_decode(log_probs.values(), log_probs.dim(0), log_probs.dim(1), blank);
}

// ---------------------------------------------------------------------------

ProbeResult demographic_probe(const Matrix& embeddings, const std::vector<std::string>& labels,
                              const std::string& attribute, std::uint64_t seed, const ProbeOptions& options) {
  if (embeddings.size() != labels.size() || embeddings.empty()) {
    throw ConfigError("probe: need one label per embedding row");
  }
  const std::size_t n = embeddings.size(), dim = embeddings.front().size();
  std::map<std::string, std::size_t> counts;
  for (const auto& l : labels) ++counts[l];
  if (counts.size() < 2) throw ConfigError("probe: attribute '" + attribute + "' has fewer than 2 cohorts");
  for (const auto& [c, k] : counts) {
    if (k < 2) throw ConfigError("probe: cohort '" + c + "' of '" + attribute + "' has fewer than 2 samples");
  }
  std::map<std::string, std::size_t> class_of;
  for (const auto& [c, _] : counts) class_of.emplace(c, class_of.size());
  const std::size_t k = class_of.size();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  auto n_train = static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  // Standardize with training statistics.
  std::vector<double> mu(dim, 0.0), sd(dim, 0.0);
  for (std::size_t r = 0; r < n_train; ++r) {
    for (std::size_t j = 0; j < dim; ++j) mu[j] += embeddings[order[r]][j];
  }
  for (double& v : mu) v /= static_cast<double>(n_train);
  for (std::size_t r = 0; r < n_train; ++r) {
    for (std::size_t j = 0; j < dim; ++j) sd[j] += std::pow(embeddings[order[r]][j] - mu[j], 2);
  }
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(n_train));
  for (double& v : sd) v = v > 1e-12 ? v : 1.0;

  auto design = [&](std::size_t from, std::size_t to, std::vector<double>& x, std::vector<std::size_t>& y) {
    x.assign((to - from) * dim, 0.0);
    y.clear();
    for (std::size_t r = from; r < to; ++r) {
      if (embeddings[order[r]].size() != dim) throw ConfigError("probe: ragged embedding rows");
      for (std::size_t j = 0; j < dim; ++j) x[(r - from) * dim + j] = (embeddings[order[r]][j] - mu[j]) / sd[j];
      y.push_back(class_of.at(labels[order[r]]));
    }
  };
  std::vector<double> x_train, x_test;
  std::vector<std::size_t> y_train, y_test;
  design(0, n_train, x_train, y_train);
  design(n_train, n, x_test, y_test);

  std::vector<double> w(dim * k, 0.0), b(k, 0.0), logits, grad_w(dim * k), grad_logits;
  auto forward = [&](const std::vector<double>& x, std::size_t rows) {
    logits.assign(rows * k, 0.0);
    kernels::gemm(false, false, rows, k, dim, x.data(), w.data(), logits.data(), false);
    for (std::size_t r = 0; r < rows; ++r) {
      double* z = logits.data() + r * k;
      for (std::size_t c = 0; c < k; ++c) z[c] += b[c];
    }
  };
  const double inv_n = 1.0 / static_cast<double>(n_train);
  for (std::size_t step = 0; step < options.steps; ++step) {
    forward(x_train, n_train);
    grad_logits.assign(n_train * k, 0.0);
    for (std::size_t r = 0; r < n_train; ++r) {
      const double* z = logits.data() + r * k;
      const double mx = *std::max_element(z, z + k);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(z[c] - mx);
      for (std::size_t c = 0; c < k; ++c) {
        grad_logits[r * k + c] = (std::exp(z[c] - mx) / s - (c == y_train[r] ? 1.0 : 0.0)) * inv_n;
      }
    }
    kernels::gemm(true, false, dim, k, n_train, x_train.data(), grad_logits.data(), grad_w.data(), false);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= options.learning_rate * grad_w[i];
    for (std::size_t c = 0; c < k; ++c) {
      double g = 0.0;
      for (std::size_t r = 0; r < n_train; ++r) g += grad_logits[r * k + c];
      b[c] -= options.learning_rate * g;
    }
  }
  auto accuracy = [&](const std::vector<double>& x, const std::vector<std::size_t>& y) {
    forward(x, y.size());
    std::size_t hit = 0;
    for (std::size_t r = 0; r < y.size(); ++r) {
      const double* z = logits.data() + r * k;
      hit += static_cast<std::size_t>(std::max_element(z, z + k) - z) == y[r];
    }
    return static_cast<double>(hit) / static_cast<double>(y.size());
  };
  ProbeResult res;
  res.attribute = attribute;
  res.n_classes = k;
  res.n_test = y_test.size();
  res.train_accuracy = accuracy(x_train, y_train);
  res.test_accuracy = accuracy(x_test, y_test);
  std::vector<std::size_t> test_counts(k, 0);
  for (std::size_t c : y_test) ++test_counts[c];
  res.chance = static_cast<double>(*std::max_element(test_counts.begin(), test_counts.end())) /
               static_cast<double>(y_test.size());
  return res;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<double, std::vector<double>>> top_eigenpairs(const Matrix& sym, std::size_t count,
                                                                   double tolerance) {
  const std::size_t d = sym.size();
  Matrix a = sym;
  std::vector<std::pair<double, std::vector<double>>> out;
  Rng rng(0x5eed);
  for (std::size_t e = 0; e < count && e < d; ++e) {
    std::vector<double> v(d), next(d);
    for (double& x : v) x = rng.uniform(0.5, 1.5);
    double lambda = 0.0;
    for (std::size_t iter = 0; iter < 200000; ++iter) {
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i][j] * v[j];
        next[i] = s;
      }
      double norm = 0.0;
      for (double x : next) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-300) {
        lambda = 0.0;
        break;
      }
      double change = 0.0, rayleigh = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        next[i] /= norm;
        change = std::max(change, std::abs(next[i] - v[i]));
      }
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a[i][j] * next[j];
        rayleigh += next[i] * s;
      }
      v.swap(next);
      const bool converged = std::abs(rayleigh - lambda) <= tolerance * std::max(1.0, std::abs(rayleigh)) &&
                             change <= std::sqrt(tolerance);
      lambda = rayleigh;
      if (converged) break;
    }
    // Sign convention: largest-magnitude component positive.
    const auto big = std::max_element(v.begin(), v.end(), [](double x, double y) { return std::abs(x) < std::abs(y); });
    if (*big < 0) {
      for (double& x : v) x = -x;
    }
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) a[i][j] -= lambda * v[i] * v[j];
    }
    out.emplace_back(lambda, v);
  }
  return out;
}

Projection2D project_2d(const Matrix& embeddings, double tolerance) {
  if (embeddings.size() < 3) throw ConfigError("project_2d: need at least 3 samples");
  const std::size_t n = embeddings.size(), d = embeddings.front().size();
  std::vector<double> mu(d, 0.0);
  for (const auto& row : embeddings) {
    if (row.size() != d) throw ConfigError("project_2d: ragged embedding rows");
    for (std::size_t j = 0; j < d; ++j) mu[j] += row[j];
  }
  for (double& v : mu) v /= static_cast<double>(n);
  Matrix cov(d, std::vector<double>(d, 0.0));
  for (const auto& row : embeddings) {
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) cov[i][j] += (row[i] - mu[i]) * (row[j] - mu[j]);
    }
  }
  for (auto& r : cov) {
    for (double& v : r) v /= static_cast<double>(n);
  }
  auto pairs = top_eigenpairs(cov, 2, tolerance);
  Projection2D out;
  double scale_ref = 0.0;
  for (std::size_t i = 0; i < d; ++i) scale_ref += cov[i][i];
  const bool rank_one = pairs.size() < 2 || pairs[1].first <= 1e-12 * std::max(scale_ref, 1e-300);
  out.eigenvalues[0] = pairs.empty() ? 0.0 : pairs[0].first;
  out.eigenvalues[1] = rank_one ? 0.0 : pairs[1].first;
  if (rank_one) out.warnings.push_back("project_2d: embeddings have rank < 2; second coordinate set to 0");
  out.coords.assign(n, {0.0, 0.0});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      if (c >= pairs.size() || (c == 1 && rank_one)) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (embeddings[r][j] - mu[j]) * pairs[c].second[j];
      out.coords[r][c] = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

EvalReport build_report(const std::vector<ScoredPair>& pairs, const std::vector<data::Demographics>& demographics,
                        const std::vector<std::string>& attributes) {
  if (pairs.size() != demographics.size()) throw ConfigError("report: one demographic record per pair required");
  EvalReport rep;
  rep.attributes = attributes;
  auto add = [](CohortStat& s, const ScoredPair& p, std::size_t errors) {
    ++s.utterances;
    s.errors += errors;
    s.ref_words += p.ref.size();
  };
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const std::size_t errors = edit_distance(pairs[i].ref, pairs[i].hyp).total();
    add(rep.total, pairs[i], errors);
    for (const auto& attr : attributes) {
      auto it = demographics[i].find(attr);
      if (it == demographics[i].end()) throw ConfigError("report: utterance lacks attribute '" + attr + "'");
      add(rep.cohorts[attr][it->second], pairs[i], errors);
    }
  }
  auto finish = [](CohortStat& s) {
    s.wer = s.ref_words ? static_cast<double>(s.errors) / static_cast<double>(s.ref_words) : 0.0;
  };
  finish(rep.total);
  for (const auto& attr : attributes) {
    std::map<std::string, double> scorable;
    for (auto& [cohort, stat] : rep.cohorts[attr]) {
      finish(stat);
      if (stat.ref_words == 0) {
        rep.warnings.push_back("cohort '" + cohort + "' of '" + attr + "' has no reference words; omitted from gap");
      } else {
        scorable[cohort] = stat.wer;
      }
    }
    if (scorable.size() >= 2) {
      rep.gap[attr] = wer_gap(scorable);
    } else {
      rep.gap[attr] = std::nullopt;
      rep.warnings.push_back("attribute '" + attr + "' has fewer than 2 scorable cohorts; gap omitted");
    }
  }
  return rep;
}

namespace {

template <class Fn>
void for_each_batch(const data::Corpus& corpus, std::size_t batch_size, Fn fn) {
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < corpus.size(); start += batch_size) {
    const std::size_t end = std::min(corpus.size(), start + batch_size);
    std::vector<const features::MelSpectrogram*> specs;
    for (std::size_t i = start; i < end; ++i) specs.push_back(&corpus[i].spec);
    fn(start, model::pad_batch(specs));
  }
}

}  // namespace

Matrix pooled_embeddings(const data::Corpus& corpus, const model::ModelParams& params, const model::EncoderConfig& cfg,
                         std::size_t batch_size) {
  ag::NoGradGuard no_grad;
  Matrix out;
  out.reserve(corpus.size());
  for_each_batch(corpus, batch_size, [&](std::size_t, const model::PaddedBatch& batch) {
    const ag::Tensor pooled = model::mean_pool(model::encode(batch, params, cfg));
    const std::size_t d = pooled.dim(1);
    for (std::size_t b = 0; b < pooled.dim(0); ++b) {
      out.emplace_back(pooled.values().begin() + static_cast<std::ptrdiff_t>(b * d),
                       pooled.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
    }
  });
  return out;
}

std::vector<Tokens> transcribe(const data::Corpus& corpus, const model::ModelParams& params,
                               const model::ModelConfig& cfg, std::size_t batch_size) {
  ag::NoGradGuard no_grad;
  std::vector<Tokens> out;
  out.reserve(corpus.size());
  for_each_batch(corpus, batch_size, [&](std::size_t, const model::PaddedBatch& batch) {
    const auto enc = model::encode(batch, params, cfg.encoder);
    const ag::Tensor lp = model::decode_logits(enc, params, cfg.head);
    const std::size_t t_max = lp.dim(1), vocab = lp.dim(2);
    for (std::size_t b = 0; b < lp.dim(0); ++b) {
      out.push_back(greedy_ctc_decode(lp.values().subspan(b * t_max * vocab, enc.lengths[b] * vocab), enc.lengths[b],
                                      vocab));
    }
  });
  return out;
}

EvalReport evaluate(const data::Corpus& test, const model::ModelParams& params, const model::ModelConfig& cfg,
                    const std::vector<std::string>& attributes) {
  if (!params.contains("dec.out.w")) throw ConfigError("evaluate: model has no decoder head (fine-tune it first)");
  if (params.at("dec.out.w").dim(1) != cfg.head.vocab_size) {
    throw ConfigError("evaluate: decoder vocabulary " + std::to_string(params.at("dec.out.w").dim(1)) +
                      " does not match configured vocab_size " + std::to_string(cfg.head.vocab_size));
  }
  for (const auto& u : test) {
    for (int tok : u.transcript) {
      if (tok < 1 || static_cast<std::size_t>(tok) >= cfg.head.vocab_size) {
        throw ConfigError("evaluate: utterance '" + u.id + "' has token " + std::to_string(tok) +
                          " outside the model vocabulary");
      }
    }
  }
  const auto hyps = transcribe(test, params, cfg);
  std::vector<ScoredPair> pairs;
  std::vector<data::Demographics> demo;
  for (std::size_t i = 0; i < test.size(); ++i) {
    pairs.push_back({test[i].transcript, hyps[i]});
    demo.push_back(test[i].demographics);
  }
  return build_report(pairs, demo, attributes);
}

// ---------------------------------------------------------------------------

namespace {

std::string fixed(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

void write_report_text(std::ostream& os, const EvalReport& report) {
  write_comparison_text(os, {{"WER (%)", report}});
}

void write_report_csv(std::ostream& os, const EvalReport& report) {
  os << "attribute,cohort,count,wer,gap\n";
  for (const auto& attr : report.attributes) {
    const auto& gap = report.gap.at(attr);
    for (const auto& [cohort, stat] : report.cohorts.at(attr)) {
      os << csv_field(attr) << ',' << csv_field(cohort) << ',' << stat.utterances << ',' << fixed(100.0 * stat.wer, 4)
         << ',' << (gap ? fixed(*gap, 4) : "") << '\n';
    }
  }
  os << "total,all," << report.total.utterances << ',' << fixed(100.0 * report.total.wer, 4) << ",\n";
}

void write_comparison_text(std::ostream& os, const std::vector<LabeledReport>& reports) {
  if (reports.empty()) return;
  const auto& first = reports.front().report;
  std::size_t label_w = 14;
  for (const auto& attr : first.attributes) {
    for (const auto& [cohort, _] : first.cohorts.at(attr)) label_w = std::max(label_w, cohort.size() + 2);
  }
  std::size_t col_w = 10;
  for (const auto& r : reports) col_w = std::max(col_w, r.label.size() + 2);
  auto row = [&](const std::string& label, const std::string& count, const std::vector<std::string>& cells) {
    os << std::left << std::setw(static_cast<int>(label_w)) << label << std::right << std::setw(8) << count;
    for (const auto& c : cells) os << std::setw(static_cast<int>(col_w)) << c;
    os << '\n';
  };
  std::vector<std::string> header;
  for (const auto& r : reports) header.push_back(r.label);
  row("", "# test", header);
  const std::string rule(label_w + 8 + col_w * reports.size(), '-');
  for (const auto& attr : first.attributes) {
    os << rule << '\n' << attr << '\n';
    for (const auto& [cohort, stat] : first.cohorts.at(attr)) {
      std::vector<std::string> cells;
      for (const auto& r : reports) {
        const auto& cs = r.report.cohorts.at(attr);
        auto it = cs.find(cohort);
        cells.push_back(it == cs.end() ? "-" : fixed(100.0 * it->second.wer, 2));
      }
      row("  " + cohort, std::to_string(stat.utterances), cells);
    }
    std::vector<std::string> gaps;
    for (const auto& r : reports) {
      const auto& g = r.report.gap.at(attr);
      gaps.push_back(g ? fixed(*g, 1) : "-");
    }
    row("  WER gap (%)", "", gaps);
  }
  os << rule << '\n';
  std::vector<std::string> totals;
  for (const auto& r : reports) totals.push_back(fixed(100.0 * r.report.total.wer, 2));
  row("Total WER", std::to_string(first.total.utterances), totals);
}

void write_comparison_csv(std::ostream& os, const std::vector<LabeledReport>& reports) {
  os << "cell,attribute,cohort,count,wer,gap\n";
  for (const auto& r : reports) {
    std::ostringstream body;
    write_report_csv(body, r.report);
    std::istringstream lines(body.str());
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) os << csv_field(r.label) << ',' << line << '\n';
  }
}

void write_embeddings_csv(std::ostream& os, const data::Corpus& corpus, const std::vector<std::string>& attributes,
                          const Matrix& rows, const std::string& value_prefix) {
  if (rows.size() != corpus.size()) throw ConfigError("embeddings: one row per utterance required");
  os << "id";
  for (const auto& a : attributes) os << ',' << csv_field(a);
  const std::size_t d = rows.empty() ? 0 : rows.front().size();
  for (std::size_t j = 0; j < d; ++j) os << ',' << value_prefix << j;
  os << '\n';
  os << std::setprecision(17);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    os << csv_field(corpus[i].id);
    for (const auto& a : attributes) os << ',' << csv_field(data::group_key(corpus[i].demographics, a));
    for (double v : rows[i]) os << ',' << v;
    os << '\n';
  }
}

}  // namespace faircl::eval
