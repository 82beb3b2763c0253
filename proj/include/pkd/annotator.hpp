#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pkd/selection.hpp"

namespace pkd {

// Annotation backends standing in for a language-model labeller.

/// Returns the true label with probability 1 - noise_rate, otherwise a
/// uniformly drawn wrong label. Draws are keyed on (seed, node).
struct GroundTruthOracle {
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
};

/// Modal teacher argmax; ties go to the lowest class index.
struct MajorityTeacherVote {};

/// POST {"prompt": ...} to `endpoint`; expects a JSON object with a
/// "Category" field in the response body.
struct ExternalHttp {
  std::string endpoint;
  double timeout_seconds = 30.0;
  int max_retries = 2;
  int max_concurrency = 4;
};

using AnnotatorKind = std::variant<GroundTruthOracle, MajorityTeacherVote, ExternalHttp>;

enum class AnnotationStatus { kOk, kParseFailed, kTimeout };
std::string_view to_string(AnnotationStatus status);

struct AnnotationRecord {
  int node = 0;
  std::string prompt;
  int category = -1;  // valid only when status == kOk
  std::string raw_response;
  AnnotationStatus status = AnnotationStatus::kOk;
};

class Annotator {
 public:
  virtual ~Annotator() = default;
  virtual AnnotationRecord annotate(int node, const std::string& prompt) const = 0;
  /// Upper bound on requests in flight for batch annotation.
  virtual int max_concurrency() const { return 1; }
};

/// `teachers` is required for MajorityTeacherVote and ignored otherwise.
/// The returned annotator keeps references to `g`, `teachers` and
/// `category_names`; they must outlive it.
std::unique_ptr<Annotator> make_annotator(const AnnotatorKind& kind, const TagGraph& g,
                                          const TeacherEnsemble* teachers,
                                          std::span<const std::string> category_names);

/// Annotates every node; records are returned sorted by node id.
std::vector<AnnotationRecord> annotate_all(const Annotator& annotator, std::span<const int> nodes,
                                           std::span<const std::string> prompts);

/// Zero-shot classification prompt for `node` with its DNS neighbours as
/// related documents (ascending index order).
std::string render_classification_prompt(const TagGraph& g, int node, const DnsResult& neighbors,
                                         std::span<const std::string> category_names);

/// Extracts "Category" from the first JSON object in `raw` and matches it
/// case-insensitively against `category_names`. nullopt on any failure.
std::optional<int> parse_annotation_response(std::string_view raw,
                                             std::span<const std::string> category_names);

/// Splits node text into (title, abstract) at the first ". ".
std::pair<std::string, std::string> split_title_abstract(const std::string& text);

std::string annotation_to_json(const AnnotationRecord& r);

}  // namespace pkd
