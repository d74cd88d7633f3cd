#pragma once

// Revisited-Oxford style evaluation: Easy / Medium / Hard label resolution,
// junk removal, trapezoidal AP and mAP over non-excluded queries.

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "dctir/binary_io.hpp"
#include "dctir/error.hpp"
#include "json.hpp"

namespace dctir {

enum class Difficulty { Easy, Medium, Hard };

inline Difficulty parse_difficulty(std::string_view s) {
  if (s == "E" || s == "e" || s == "easy") return Difficulty::Easy;
  if (s == "M" || s == "m" || s == "medium") return Difficulty::Medium;
  if (s == "H" || s == "h" || s == "hard") return Difficulty::Hard;
  fail(ErrorCode::InvalidArgument, "difficulty must be E, M or H, got \"" + std::string(s) + "\"");
}

inline const char* difficulty_letter(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "E";
    case Difficulty::Medium: return "M";
    case Difficulty::Hard: return "H";
  }
  return "?";
}

struct QueryTruth {
  std::string name;
  std::optional<std::array<double, 4>> bbox;  // x1, y1, x2, y2 in pixels
  std::vector<std::string> easy;
  std::vector<std::string> hard;
  std::vector<std::string> junk;
};

struct GroundTruth {
  std::vector<std::string> gallery;
  std::vector<QueryTruth> queries;

  const QueryTruth& query(const std::string& name) const {
    for (const auto& q : queries)
      if (q.name == name) return q;
    fail(ErrorCode::UnknownQuery, "unknown query \"" + name + "\"");
  }

  /// Label sets pairwise disjoint and drawn from the gallery roster.
  void validate() const {
    const std::unordered_set<std::string> roster(gallery.begin(), gallery.end());
    require(roster.size() == gallery.size(), ErrorCode::InvalidArgument, "duplicate gallery id");
    std::set<std::string> names;
    for (const auto& q : queries) {
      require(names.insert(q.name).second, ErrorCode::InvalidArgument, "duplicate query name " + q.name);
      std::set<std::string> seen;
      for (const auto* list : {&q.easy, &q.hard, &q.junk})
        for (const auto& id : *list) {
          require(roster.count(id) != 0, ErrorCode::InvalidArgument, "query " + q.name + " labels unknown id " + id);
          require(seen.insert(id).second, ErrorCode::InvalidArgument, "query " + q.name + " labels " + id + " twice");
        }
    }
  }
};

struct LabelSets {
  std::set<std::string> positives;
  std::set<std::string> ignored;
};

/// E: easy positive, hard+junk ignored. M: easy+hard positive, junk ignored.
/// H: hard positive, easy+junk ignored.
inline LabelSets resolve_labels(const QueryTruth& q, Difficulty d) {
  LabelSets s;
  auto put = [](std::set<std::string>& dst, const std::vector<std::string>& src) { dst.insert(src.begin(), src.end()); };
  switch (d) {
    case Difficulty::Easy:
      put(s.positives, q.easy);
      put(s.ignored, q.hard);
      break;
    case Difficulty::Medium:
      put(s.positives, q.easy);
      put(s.positives, q.hard);
      break;
    case Difficulty::Hard:
      put(s.positives, q.hard);
      put(s.ignored, q.easy);
      break;
  }
  put(s.ignored, q.junk);
  return s;
}

inline LabelSets resolve_labels(const GroundTruth& gt, const std::string& query, Difficulty d) {
  return resolve_labels(gt.query(query), d);
}

/// Ignored ids are dropped first; then each positive at cleaned rank i
/// (1-based, the k-th positive) adds (old_precision + k/i) / 2 / |positives|,
/// with old_precision starting at 1 and moving to k/i after each positive.
/// Positives never retrieved add nothing.
inline double average_precision(const std::vector<std::string>& ranked, const std::set<std::string>& positives,
                                const std::set<std::string>& ignored) {
  require(!positives.empty(), ErrorCode::NoPositives, "query has no positives");
  std::unordered_set<std::string> seen;
  for (const auto& id : ranked) require(seen.insert(id).second, ErrorCode::InvalidArgument, "ranking repeats id " + id);
  const double step = 1.0 / static_cast<double>(positives.size());
  double ap = 0.0, old_precision = 1.0;
  std::size_t rank = 0, hits = 0;
  for (const auto& id : ranked) {
    if (ignored.count(id)) continue;
    ++rank;
    if (!positives.count(id)) continue;
    ++hits;
    const double precision = static_cast<double>(hits) / static_cast<double>(rank);
    ap += (old_precision + precision) / 2.0 * step;
    old_precision = precision;
  }
  return ap;
}

struct MapReport {
  Difficulty difficulty = Difficulty::Medium;
  double map = 0.0;
  std::vector<std::pair<std::string, double>> per_query;
  std::vector<std::string> excluded;  // queries without positives at this difficulty
};

/// Mean AP over queries that have positives; rankings maps query name to
/// its ranked gallery ids. Queries missing from `rankings` rank nothing.
inline MapReport mean_average_precision(const std::map<std::string, std::vector<std::string>>& rankings,
                                        const GroundTruth& gt, Difficulty d) {
  MapReport r;
  r.difficulty = d;
  for (const auto& [name, _] : rankings) gt.query(name);
  double sum = 0.0;
  for (const auto& q : gt.queries) {
    const auto it = rankings.find(q.name);
    if (it == rankings.end()) continue;
    const LabelSets s = resolve_labels(q, d);
    if (s.positives.empty()) {
      r.excluded.push_back(q.name);
      continue;
    }
    const double ap = average_precision(it->second, s.positives, s.ignored);
    r.per_query.emplace_back(q.name, ap);
    sum += ap;
  }
  require(!r.per_query.empty(), ErrorCode::AllQueriesExcluded, "no query has positives at this difficulty");
  r.map = sum / static_cast<double>(r.per_query.size());
  return r;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const GroundTruth& gt) {
  nlohmann::json j;
  j["gallery"] = gt.gallery;
  j["queries"] = nlohmann::json::array();
  for (const auto& q : gt.queries) {
    nlohmann::json e{{"name", q.name}, {"easy", q.easy}, {"hard", q.hard}, {"junk", q.junk}};
    if (q.bbox) e["bbox"] = *q.bbox;
    j["queries"].push_back(std::move(e));
  }
  return j;
}

namespace detail {

// Published ROxf ground truth exported as JSON: names in imlist/qimlist and
// per-query index lists in gnd.
inline GroundTruth ground_truth_from_roxf(const nlohmann::json& j) {
  GroundTruth gt;
  gt.gallery = j.at("imlist").get<std::vector<std::string>>();
  const auto qnames = j.at("qimlist").get<std::vector<std::string>>();
  const auto& gnd = j.at("gnd");
  require(gnd.size() == qnames.size(), ErrorCode::InvalidArgument, "gnd and qimlist lengths differ");
  auto names = [&](const nlohmann::json& idx) {
    std::vector<std::string> out;
    for (const auto& v : idx) {
      const auto i = v.get<std::size_t>();
      require(i < gt.gallery.size(), ErrorCode::InvalidArgument, "gnd index outside imlist");
      out.push_back(gt.gallery[i]);
    }
    return out;
  };
  for (std::size_t i = 0; i < qnames.size(); ++i) {
    QueryTruth q;
    q.name = qnames[i];
    q.easy = names(gnd[i].value("easy", nlohmann::json::array()));
    q.hard = names(gnd[i].value("hard", nlohmann::json::array()));
    q.junk = names(gnd[i].value("junk", nlohmann::json::array()));
    if (gnd[i].contains("bbx")) q.bbox = gnd[i]["bbx"].get<std::array<double, 4>>();
    gt.queries.push_back(std::move(q));
  }
  return gt;
}

}  // namespace detail

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  GroundTruth gt;
  try {
    if (j.contains("imlist") && j.contains("gnd")) {
      gt = detail::ground_truth_from_roxf(j);
    } else {
      gt.gallery = j.at("gallery").get<std::vector<std::string>>();
      for (const auto& e : j.at("queries")) {
        QueryTruth q;
        q.name = e.at("name").get<std::string>();
        q.easy = e.value("easy", std::vector<std::string>{});
        q.hard = e.value("hard", std::vector<std::string>{});
        q.junk = e.value("junk", std::vector<std::string>{});
        if (e.contains("bbox") && !e["bbox"].is_null()) q.bbox = e["bbox"].get<std::array<double, 4>>();
        gt.queries.push_back(std::move(q));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("ground truth JSON: ") + e.what());
  }
  gt.validate();
  return gt;
}

inline GroundTruth load_ground_truth(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, "cannot parse " + path.string() + ": " + e.what());
  }
  return ground_truth_from_json(j);
}

inline void save_ground_truth(const std::filesystem::path& path, const GroundTruth& gt) {
  const std::string s = to_json(gt).dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

}  // namespace dctir
