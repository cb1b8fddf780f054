#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "faircl/autograd.hpp"
#include "faircl/data.hpp"
#include "faircl/model.hpp"

namespace faircl::eval {

using Tokens = std::vector<int>;

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  std::size_t total() const { return substitutions + deletions + insertions; }
  bool operator==(const EditCounts&) const = default;
};

// Unit-cost Levenshtein alignment; the backtrace prefers the diagonal
// (match/substitution), then insertion, then deletion.
EditCounts edit_distance(std::span<const int> ref, std::span<const int> hyp);

struct ScoredPair {
  Tokens ref;
  Tokens hyp;
};

// (sum S + sum D + sum I) / sum |ref|.
double wer(const std::vector<ScoredPair>& pairs);

// 100 * (max - min) / max over cohort WERs; 0 when max is 0.
double wer_gap(const std::map<std::string, double>& cohort_wers);

// Per-frame argmax, collapse repeats, drop blanks. log_probs: [T, V].
Tokens greedy_ctc_decode(const ag::Tensor& log_probs, int blank = 0);
Tokens greedy_ctc_decode(std::span<const double> log_probs, std::size_t frames, std::size_t vocab, int blank = 0);

using Matrix = std::vector<std::vector<double>>;

struct ProbeResult {
  std::string attribute;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  // Accuracy of always predicting the most frequent test cohort.
  double chance = 0.0;
  std::size_t n_classes = 0;
  std::size_t n_test = 0;
};

struct ProbeOptions {
  std::size_t steps = 500;
  double learning_rate = 0.1;
  double train_fraction = 0.8;
};

// Softmax regression on standardized features, full-batch gradient descent,
// seeded train/test split.
ProbeResult demographic_probe(const Matrix& embeddings, const std::vector<std::string>& labels,
                              const std::string& attribute, std::uint64_t seed, const ProbeOptions& options = {});

struct Projection2D {
  Matrix coords;  // n × 2
  double eigenvalues[2] = {0.0, 0.0};
  std::vector<std::string> warnings;
};

// Mean-centred projection onto the top two covariance eigenvectors found by
// power iteration with deflation.
Projection2D project_2d(const Matrix& embeddings, double tolerance = 1e-9);

// Largest eigenpairs of a symmetric matrix by power iteration with
// deflation; exposed for testing.
std::vector<std::pair<double, std::vector<double>>> top_eigenpairs(const Matrix& sym, std::size_t count,
                                                                   double tolerance = 1e-9);

struct CohortStat {
  std::size_t utterances = 0;
  std::size_t errors = 0;
  std::size_t ref_words = 0;
  double wer = 0.0;  // fraction
};

struct EvalReport {
  std::vector<std::string> attributes;
  std::map<std::string, std::map<std::string, CohortStat>> cohorts;
  std::map<std::string, std::optional<double>> gap;  // percent; empty when < 2 scorable cohorts
  CohortStat total;
  std::vector<std::string> warnings;
};

// Groups scored pairs by each attribute and computes micro WER per cohort.
EvalReport build_report(const std::vector<ScoredPair>& pairs, const std::vector<data::Demographics>& demographics,
                        const std::vector<std::string>& attributes);

// Mean-pooled encoder features per utterance, no graph recorded.
Matrix pooled_embeddings(const data::Corpus& corpus, const model::ModelParams& params,
                         const model::EncoderConfig& cfg, std::size_t batch_size = 32);

std::vector<Tokens> transcribe(const data::Corpus& corpus, const model::ModelParams& params,
                               const model::ModelConfig& cfg, std::size_t batch_size = 32);

// Greedy-decodes every utterance and assembles the cohort report.
EvalReport evaluate(const data::Corpus& test, const model::ModelParams& params, const model::ModelConfig& cfg,
                    const std::vector<std::string>& attributes);

// Aligned text table: cohorts per attribute with count and WER (%), then
// the attribute's WER gap, then total WER.
void write_report_text(std::ostream& os, const EvalReport& report);
// attribute,cohort,count,wer,gap (wer and gap in percent).
void write_report_csv(std::ostream& os, const EvalReport& report);

struct LabeledReport {
  std::string label;
  EvalReport report;
};
// One column per report; rows as in write_report_text.
void write_comparison_text(std::ostream& os, const std::vector<LabeledReport>& reports);
void write_comparison_csv(std::ostream& os, const std::vector<LabeledReport>& reports);

// id, one column per attribute, then the embedding values.
void write_embeddings_csv(std::ostream& os, const data::Corpus& corpus, const std::vector<std::string>& attributes,
                          const Matrix& rows, const std::string& value_prefix = "v");

}  // namespace faircl::eval
