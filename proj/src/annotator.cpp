#include "pkd/annotator.hpp"

#include <algorithm>
#include <cctype>
#include <future>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "pkd/training.hpp"

namespace pkd {
namespace {

using json = nlohmann::json;

std::string join_names(std::span<const std::string> names) {
  std::string out = "[";
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (k > 0) out += ", ";
    out += names[k];
  }
  return out + "]";
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// End of the balanced object starting at `begin`, honouring JSON strings.
std::optional<std::size_t> object_end(std::string_view raw, std::size_t begin) {
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = begin; i < raw.size(); ++i) {
    const char c = raw[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i;
    }
  }
  return std::nullopt;
}

class OracleAnnotator final : public Annotator {
 public:
  OracleAnnotator(const TagGraph& g, GroundTruthOracle cfg) : g_(g), cfg_(cfg) {
    if (!(cfg.noise_rate >= 0.0 && cfg.noise_rate <= 1.0)) {
      throw std::invalid_argument("oracle noise_rate must lie in [0, 1]");
    }
  }

  AnnotationRecord annotate(int node, const std::string& prompt) const override {
    if (node < 0 || node >= g_.node_count()) throw std::out_of_range("annotate: node out of range");
    Rng rng(derive_seed(cfg_.seed, "oracle", static_cast<std::uint64_t>(node)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int truth = g_.labels()[node];
    int label = truth;
    if (unit(rng) < cfg_.noise_rate) {
      std::uniform_int_distribution<int> other(0, g_.class_count() - 2);
      const int k = other(rng);
      label = k < truth ? k : k + 1;
    }
    return {node, prompt, label, {}, AnnotationStatus::kOk};
  }

 private:
  const TagGraph& g_;
  GroundTruthOracle cfg_;
};

class MajorityVoteAnnotator final : public Annotator {
 public:
  explicit MajorityVoteAnnotator(const TeacherEnsemble& teachers) : teachers_(teachers) {
    if (teachers.size() == 0) throw std::invalid_argument("majority vote needs at least one teacher");
  }

  AnnotationRecord annotate(int node, const std::string& prompt) const override {
    if (node < 0 || node >= teachers_.node_count()) throw std::out_of_range("annotate: node out of range");
    std::vector<int> votes(teachers_.class_count(), 0);
    for (int c : teachers_.predictions(node)) ++votes[c];
    const int mode = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    return {node, prompt, mode, {}, AnnotationStatus::kOk};
  }

 private:
  const TeacherEnsemble& teachers_;
};

class HttpAnnotator final : public Annotator {
 public:
  HttpAnnotator(ExternalHttp cfg, std::span<const std::string> names) : cfg_(std::move(cfg)), names_(names) {
    if (cfg_.endpoint.empty()) throw std::invalid_argument("ExternalHttp endpoint must be nonempty");
    const auto scheme = cfg_.endpoint.find("://");
    const auto path_begin = cfg_.endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    if (path_begin == std::string::npos) {
      base_ = cfg_.endpoint;
      path_ = "/";
    } else {
      base_ = cfg_.endpoint.substr(0, path_begin);
      path_ = cfg_.endpoint.substr(path_begin);
    }
  }

  int max_concurrency() const override { return std::max(1, cfg_.max_concurrency); }

  AnnotationRecord annotate(int node, const std::string& prompt) const override {
    AnnotationRecord rec{node, prompt, -1, {}, AnnotationStatus::kTimeout};
    httplib::Client client(base_);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    const std::string body = json{{"prompt", prompt}}.dump();
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      auto res = client.Post(path_, body, "application/json");
      if (!res) {
        rec.status = AnnotationStatus::kTimeout;
        continue;
      }
      rec.raw_response = res->body;
      if (res->status != 200) {
        rec.status = AnnotationStatus::kParseFailed;
        continue;
      }
      if (auto c = parse_annotation_response(res->body, names_)) {
        rec.category = *c;
        rec.status = AnnotationStatus::kOk;
      } else {
        rec.status = AnnotationStatus::kParseFailed;
      }
      // A well-formed exchange is final even when the answer is unusable.
      break;
    }
    return rec;
  }

 private:
  ExternalHttp cfg_;
  std::span<const std::string> names_;
  std::string base_;
  std::string path_;
};

}  // namespace

std::string_view to_string(AnnotationStatus status) {
  switch (status) {
    case AnnotationStatus::kOk: return "ok";
    case AnnotationStatus::kParseFailed: return "parse_failed";
    case AnnotationStatus::kTimeout: return "timeout";
  }
  return "?";
}

std::unique_ptr<Annotator> make_annotator(const AnnotatorKind& kind, const TagGraph& g,
                                          const TeacherEnsemble* teachers,
                                          std::span<const std::string> category_names) {
  struct Factory {
    const TagGraph& g;
    const TeacherEnsemble* teachers;
    std::span<const std::string> names;
    std::unique_ptr<Annotator> operator()(const GroundTruthOracle& o) const {
      return std::make_unique<OracleAnnotator>(g, o);
    }
    std::unique_ptr<Annotator> operator()(const MajorityTeacherVote&) const {
      if (teachers == nullptr) throw std::invalid_argument("majority vote annotator requires teachers");
      return std::make_unique<MajorityVoteAnnotator>(*teachers);
    }
    std::unique_ptr<Annotator> operator()(const ExternalHttp& h) const {
      return std::make_unique<HttpAnnotator>(h, names);
    }
  };
  return std::visit(Factory{g, teachers, category_names}, kind);
}

std::vector<AnnotationRecord> annotate_all(const Annotator& annotator, std::span<const int> nodes,
                                           std::span<const std::string> prompts) {
  if (nodes.size() != prompts.size()) throw std::invalid_argument("annotate_all: nodes/prompts length mismatch");
  std::vector<AnnotationRecord> out;
  out.reserve(nodes.size());
  const auto width = static_cast<std::size_t>(annotator.max_concurrency());
  if (width <= 1) {
    for (std::size_t k = 0; k < nodes.size(); ++k) out.push_back(annotator.annotate(nodes[k], prompts[k]));
  } else {
    for (std::size_t begin = 0; begin < nodes.size(); begin += width) {
      std::vector<std::future<AnnotationRecord>> batch;
      const auto end = std::min(nodes.size(), begin + width);
      for (std::size_t k = begin; k < end; ++k) {
        batch.push_back(std::async(std::launch::async, [&annotator, node = nodes[k], &prompt = prompts[k]] {
          return annotator.annotate(node, prompt);
        }));
      }
      for (auto& f : batch) out.push_back(f.get());
    }
  }
  std::sort(out.begin(), out.end(),
            [](const AnnotationRecord& a, const AnnotationRecord& b) { return a.node < b.node; });
  return out;
}

std::pair<std::string, std::string> split_title_abstract(const std::string& text) {
  const auto cut = text.find(". ");
  if (cut == std::string::npos) return {text, {}};
  return {text.substr(0, cut), text.substr(cut + 2)};
}

std::string render_classification_prompt(const TagGraph& g, int node, const DnsResult& neighbors,
                                         std::span<const std::string> category_names) {
  if (node < 0 || node >= g.node_count()) throw std::out_of_range("render: node out of range");
  if (static_cast<int>(category_names.size()) != g.class_count()) {
    throw std::invalid_argument("render: category name count differs from class count");
  }
  const std::string count = std::to_string(category_names.size());
  const std::string list = join_names(category_names);
  const bool related = !neighbors.merged.empty();

  std::ostringstream p;
  p << "[System]\n"
    << "Papers in this field can be divided into " << count << " categories: " << list
    << ". You will serve as an assistant to help me to classify this target paper into the " << count
    << " categories above according to its description"
    << (related ? " and related papers' descriptions, who may be of the same category as this target paper"
                : "")
    << ". I will provide you with the descriptions of this target paper"
    << (related ? " and its related papers" : "") << ".\n"
    << "Here are the instructions:\n"
    << "I will provide you with information in the form of a JSON string that describes the target paper:\n"
    << "Title: the title of this target paper. Abstract: the abstract of this target paper.\n";
  if (related) {
    p << "Related Title: the title of the related paper. Related Abstract: the abstract of the related paper.\n"
      << "...\n";
  }
  p << "Requirements:\n"
    << "1. Please provide your response in JSON format, following this structure:\n"
    << "Reasoning: Briefly explain your reasoning process for the predicted category.\n"
    << "Category: The best category you predict for this paper, this category must belong to these "
    << count << " categories: " << list << ";\n"
    << "2. There are 2000 words limits for the reasoning;\n"
    << "3. Do not provide any other text outside the JSON string;\n"
    << "4. Focus only on content in the actual text and avoid making false associations;\n"
    << "5. The output can only contain category and reasoning.\n"
    << "[User]\n";
  const auto [title, abstract] = split_title_abstract(g.texts()[node]);
  p << "Title: " << title << ". Abstract: " << abstract << ".\n";
  for (int r : neighbors.merged) {
    const auto [rt, ra] = split_title_abstract(g.texts().at(r));
    p << "Related Title: " << rt << ". Related Abstract: " << ra << ".\n";
  }
  return p.str();
}

std::optional<int> parse_annotation_response(std::string_view raw,
                                             std::span<const std::string> category_names) {
  for (auto begin = raw.find('{'); begin != std::string_view::npos; begin = raw.find('{', begin + 1)) {
    const auto end = object_end(raw, begin);
    if (!end) continue;
    const json obj = json::parse(raw.substr(begin, *end - begin + 1), nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) continue;
    // First parseable object decides.
    const auto it = obj.find("Category");
    if (it == obj.end() || !it->is_string()) return std::nullopt;
    const std::string wanted = lower(trim(it->get<std::string>()));
    std::optional<int> match;
    for (std::size_t c = 0; c < category_names.size(); ++c) {
      if (lower(trim(category_names[c])) == wanted) {
        if (match) return std::nullopt;  // ambiguous
        match = static_cast<int>(c);
      }
    }
    return match;
  }
  return std::nullopt;
}

std::string annotation_to_json(const AnnotationRecord& r) {
  json j;
  j["node"] = r.node;
  j["status"] = std::string(to_string(r.status));
  j["category"] = r.category;
  j["raw_response"] = r.raw_response;
  j["prompt"] = r.prompt;
  return j.dump();
}

}  // namespace pkd
