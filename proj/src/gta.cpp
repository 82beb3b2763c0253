#include "pkd/gta.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "pkd/annotator.hpp"

namespace pkd {

std::string_view to_string(GtaTask task) {
  switch (task) {
    case GtaTask::kConnectivity: return "connectivity";
    case GtaTask::kDegree: return "degree";
    case GtaTask::kCycle: return "cycle";
    case GtaTask::kTextgen: return "textgen";
  }
  return "?";
}

namespace {

constexpr const char* kRequirements =
    "Requirements:\n"
    "1. Please provide your response in JSON format, following this structure:\n"
    "Reasoning: Briefly explain your reasoning process.\n"
    "Answer: %ANSWER%;\n"
    "2. There are 2000 words limits for the reasoning;\n"
    "3. Do not provide any other text outside the JSON string;\n"
    "4. Focus only on content in the actual text and avoid making false associations;\n"
    "5. The output can only contain answer and reasoning.\n";

std::string requirements(const std::string& answer_spec) {
  std::string r = kRequirements;
  r.replace(r.find("%ANSWER%"), 8, answer_spec);
  return r;
}

std::string describe_node(const TagGraph& g, int node) {
  const auto [title, abstract] = split_title_abstract(g.texts()[node]);
  std::ostringstream out;
  out << "Node index: " << node << ";  Title: " << title << ";  Abstract: " << abstract << "\n";
  int k = 1;
  for (int nb : g.neighbors(node)) {
    const auto [nt, na] = split_title_abstract(g.texts()[nb]);
    out << "The " << k++ << "-th neighbor's node index: " << nb << " Title: " << nt << " Abstract: " << na << "\n";
  }
  return out.str();
}

std::vector<int> sample_without_replacement(int population, int count, Rng& rng) {
  std::vector<int> idx(population);
  for (int i = 0; i < population; ++i) idx[i] = i;
  for (int k = 0; k < count; ++k) {
    std::uniform_int_distribution<int> pick(k, population - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(count);
  return idx;
}

std::string bool_text(bool b) { return b ? "True" : "False"; }

}  // namespace

std::vector<GtaRecord> gen_connectivity(const TagGraph& g, std::uint64_t seed) {
  const long long n = g.node_count();
  if (n < 2) throw std::invalid_argument("connectivity task needs at least two nodes");
  const long long pairs = n * (n - 1) / 2;
  const long long count = n * (n - 1) / 6;
  if (pairs > std::numeric_limits<int>::max()) throw std::invalid_argument("graph too large for pair sampling");
  Rng rng(derive_seed(seed, "gta-connectivity"));
  std::vector<int> chosen = sample_without_replacement(static_cast<int>(pairs), static_cast<int>(count), rng);
  std::sort(chosen.begin(), chosen.end());

  // Pair index p enumerates (i, j), i < j, row by row.
  std::vector<long long> row_start(n);
  for (long long i = 0, acc = 0; i < n; ++i) {
    row_start[i] = acc;
    acc += n - 1 - i;
  }
  const std::string system =
      "You will serve as a graph machine learning expert in connectivity detection to help me to determine whether"
      " the edge exists between the given two targeted nodes. There is a undirected graph consisting of papers"
      " (nodes) and the citation relationships (edges) between them. I will provide the information of the two"
      " targeted nodes and their neighbors, consisting of indexes, textual content.\n"
      "Here are the instructions:\n"
      "I will provide you with information in the form of a JSON string that describes the target papers:\n"
      "The first targeted paper:\nNode index: ...;  Title: ...;  Abstract: ...;\n"
      "The k-th neighbor: Index:...; Title: ...;  Abstract: ...;\n...\n"
      "The second targeted paper:\nNode index: ...;  Title: ...;  Abstract: ...;\n"
      "The k-th neighbor: Index:...; Title: ...;  Abstract: ...;\n...\n" +
      requirements("You only can select one from [True, False] as the best answer");

  std::vector<GtaRecord> out;
  out.reserve(chosen.size());
  for (int p : chosen) {
    const auto it = std::upper_bound(row_start.begin(), row_start.end(), static_cast<long long>(p)) - 1;
    const int i = static_cast<int>(it - row_start.begin());
    const int j = static_cast<int>(i + 1 + (p - *it));
    const bool edge = g.has_edge(i, j);
    GtaRecord r;
    r.task = GtaTask::kConnectivity;
    r.instruction = "[System]\n" + system + "[User]\nThe first targeted paper:\n" + describe_node(g, i) +
                    "The second targeted paper:\n" + describe_node(g, j);
    r.answer = bool_text(edge);
    r.structured = edge;
    r.nodes = {i, j};
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GtaRecord> gen_degree(const TagGraph& g, std::uint64_t seed) {
  if (g.node_count() < 1) throw std::invalid_argument("degree task needs at least one node");
  std::map<int, std::vector<int>> groups;
  for (int v = 0; v < g.node_count(); ++v) groups[g.degree(v)].push_back(v);
  Rng rng(derive_seed(seed, "gta-degree"));
  const std::string system =
      "You will serve as a graph machine learning expert in node degree counting to help me to determine how many"
      " nodes are directly connected to the given targeted node. There is a undirected graph consisting of papers"
      " (nodes) and the citation relationships (edges) between them. I will provide the information of the"
      " targeted node and its neighbors, consisting of indexes, textual content.\n"
      "Here are the instructions:\n"
      "I will provide you with information in the form of a JSON string that describes the target paper:\n"
      "The targeted paper:\nNode index: ...;  Title: ...;  Abstract: ...;\n"
      "The k-th neighbor: Index:...; Title: ...;  Abstract: ...;\n...\n" +
      requirements("The degree of the targeted node as a nonnegative integer");

  std::vector<GtaRecord> out;
  for (const auto& [degree, members] : groups) {
    const int take = static_cast<int>((members.size() + 2) / 3);
    std::vector<int> picks = sample_without_replacement(static_cast<int>(members.size()), take, rng);
    std::sort(picks.begin(), picks.end());
    for (int k : picks) {
      const int v = members[k];
      GtaRecord r;
      r.task = GtaTask::kDegree;
      r.instruction = "[System]\n" + system + "[User]\nThe targeted paper:\n" + describe_node(g, v);
      r.answer = std::to_string(degree);
      r.structured = degree;
      r.nodes = {v};
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<GtaRecord> gen_cycle(const TagGraph& g, std::uint64_t seed, int num_walks, int walk_len) {
  if (walk_len <= 10) throw std::invalid_argument("cycle walks must be longer than 10 nodes");
  if (num_walks < 0) throw std::invalid_argument("num_walks must be nonnegative");
  if (g.node_count() < 1) throw std::invalid_argument("cycle task needs a nonempty graph");
  Rng rng(derive_seed(seed, "gta-cycle"));
  std::uniform_int_distribution<int> start(0, g.node_count() - 1);
  const std::string system =
      "You will serve as a graph machine learning expert in cycle detection to help me to determine whether a cycle"
      " exists within the given sequence of nodes. There is a undirected graph consisting of papers (nodes) and the"
      " citation relationships (edges) between them. A cycle is a path whose first and last nodes are the same. I"
      " will provide the node sequence and the neighbors of every node in it.\n"
      "Here are the instructions:\n"
      "Sequence: the node indexes in visiting order.\n"
      "Node index: ...; Neighbors: ...\n...\n" +
      requirements("You only can select one from [True, False] as the best answer");

  std::vector<GtaRecord> out;
  for (int w = 0; w < num_walks; ++w) {
    std::vector<int> walk{start(rng)};
    while (static_cast<int>(walk.size()) < walk_len) {
      const int here = walk.back();
      const int prev = walk.size() >= 2 ? walk[walk.size() - 2] : -1;
      std::vector<int> exits;
      for (int nb : g.neighbors(here)) {
        if (nb != prev) exits.push_back(nb);
      }
      if (exits.empty()) break;
      walk.push_back(exits[std::uniform_int_distribution<int>(0, static_cast<int>(exits.size()) - 1)(rng)]);
    }
    if (walk.size() <= 10) continue;
    std::unordered_set<int> seen;
    bool repeated = false;
    for (int v : walk) repeated |= !seen.insert(v).second;

    std::ostringstream user;
    user << "Sequence:";
    for (int v : walk) user << ' ' << v;
    user << "\n";
    std::vector<int> distinct(walk.begin(), walk.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (int v : distinct) {
      user << "Node index: " << v << "; Neighbors:";
      for (int nb : g.neighbors(v)) user << ' ' << nb;
      user << "\n";
    }
    GtaRecord r;
    r.task = GtaTask::kCycle;
    r.instruction = "[System]\n" + system + "[User]\n" + user.str();
    r.answer = bool_text(repeated);
    r.structured = repeated;
    r.nodes = std::move(walk);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::vector<int>> bfs_paths(const TagGraph& g, int source) {
  const int n = g.node_count();
  if (source < 0 || source >= n) throw std::out_of_range("bfs: source out of range");
  std::vector<int> parent(n, -2);
  parent[source] = -1;
  std::queue<int> q;
  q.push(source);
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    for (int v : g.neighbors(u)) {
      if (parent[v] == -2) {
        parent[v] = u;
        q.push(v);
      }
    }
  }
  std::vector<std::vector<int>> paths(n);
  for (int v = 0; v < n; ++v) {
    if (parent[v] == -2) continue;
    for (int x = v; x != -1; x = parent[x]) paths[v].push_back(x);
    std::reverse(paths[v].begin(), paths[v].end());
  }
  return paths;
}

std::vector<GtaRecord> gen_textgen(const TagGraph& g, std::uint64_t seed, int t) {
  if (t < 1) throw std::invalid_argument("textgen distance t must be at least 1");
  const int n = g.node_count();
  if (std::any_of(g.texts().begin(), g.texts().end(), [](const std::string& s) { return s.empty(); })) {
    throw std::invalid_argument("textgen requires a text for every node");
  }
  Rng rng(derive_seed(seed, "gta-textgen"));
  std::vector<int> sources = sample_without_replacement(n, n / 3, rng);
  std::sort(sources.begin(), sources.end());
  const std::string system =
      "You will serve as a graph machine learning expert in path-based text generation to help me to write the"
      " textual description of a target node. There is a undirected graph consisting of papers (nodes) and the"
      " citation relationships (edges) between them. I will provide the papers along a shortest path that ends"
      " just before the target paper, in order.\n"
      "Here are the instructions:\n"
      "Path node: Node index: ...;  Title: ...;  Abstract: ...;\n...\n"
      "Target node index: ...\n" +
      requirements("The title and abstract of the target paper");

  std::vector<GtaRecord> out;
  for (int s : sources) {
    const auto paths = bfs_paths(g, s);
    std::vector<int> far;
    for (int v = 0; v < n; ++v) {
      if (!paths[v].empty() && static_cast<int>(paths[v].size()) - 1 > t) far.push_back(v);
    }
    if (far.empty()) continue;
    const int target = far[std::uniform_int_distribution<int>(0, static_cast<int>(far.size()) - 1)(rng)];
    const auto& path = paths[target];
    std::ostringstream user;
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      const auto [title, abstract] = split_title_abstract(g.texts()[path[k]]);
      user << "Path node: Node index: " << path[k] << ";  Title: " << title << ";  Abstract: " << abstract << "\n";
    }
    user << "Target node index: " << target << "\n";
    GtaRecord r;
    r.task = GtaTask::kTextgen;
    r.instruction = "[System]\n" + system + "[User]\n" + user.str();
    r.answer = g.texts()[target];
    r.structured = g.texts()[target];
    r.nodes = path;
    out.push_back(std::move(r));
  }
  return out;
}

std::string gta_record_to_json(const GtaRecord& r) {
  nlohmann::ordered_json j;
  j["task"] = std::string(to_string(r.task));
  j["instruction"] = r.instruction;
  j["answer"] = r.answer;
  j["nodes"] = r.nodes;
  return j.dump();
}

GtaCounts emit_gta(const TagGraph& g, const std::filesystem::path& out, std::uint64_t seed, int t, int walk_len,
                   int num_walks) {
  const bool has_texts =
      g.node_count() > 0 &&
      std::none_of(g.texts().begin(), g.texts().end(), [](const std::string& s) { return s.empty(); });
  const auto conn = gen_connectivity(g, seed);
  const auto deg = gen_degree(g, seed);
  const auto cyc = gen_cycle(g, seed, num_walks, walk_len);
  const auto text = has_texts ? gen_textgen(g, seed, t) : std::vector<GtaRecord>{};

  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + out.string() + " for writing");
  for (const auto* set : {&conn, &deg, &cyc, &text}) {
    for (const auto& r : *set) f << gta_record_to_json(r) << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + out.string());
  return {static_cast<int>(conn.size()), static_cast<int>(deg.size()), static_cast<int>(cyc.size()),
          static_cast<int>(text.size())};
}

}  // namespace pkd
