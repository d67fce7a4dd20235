#include "dacmap/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dacmap/csv.hpp"

namespace dacmap {

AreaGraph::AreaGraph(std::vector<std::string> ids, std::vector<Edge> edges)
    : ids_(std::move(ids)) {
  for (Index i = 0; i < size(); ++i) {
    if (!index_.emplace(ids_[static_cast<std::size_t>(i)], i).second) {
      fail("duplicate area id '" + ids_[static_cast<std::size_t>(i)] + "'");
    }
  }
  for (auto &[a, b] : edges) {
    if (a < 0 || b < 0 || a >= size() || b >= size()) fail("edge endpoint out of range");
    if (a == b) fail("self-loop on area '" + id(a) + "'");
    if (a > b) std::swap(a, b);
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);
  adjacency_.assign(ids_.size(), {});
  for (auto [a, b] : edges_) {
    adjacency_[static_cast<std::size_t>(a)].push_back(b);
    adjacency_[static_cast<std::size_t>(b)].push_back(a);
  }
  for (auto &nb : adjacency_) std::sort(nb.begin(), nb.end());
}

std::optional<Index> AreaGraph::index_of(const std::string &id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool AreaGraph::adjacent(Index a, Index b) const {
  auto nb = neighbours(a);
  return std::binary_search(nb.begin(), nb.end(), b);
}

AreaGraph AreaGraph::with_partition(std::vector<int> labels) const {
  if (static_cast<Index>(labels.size()) != size()) fail("partition size does not match graph");
  int d = 0;
  for (int l : labels) {
    if (l < 1) fail("partition labels must be positive integers");
    d = std::max(d, l);
  }
  std::vector<bool> seen(static_cast<std::size_t>(d) + 1, false);
  for (int l : labels) seen[static_cast<std::size_t>(l)] = true;
  for (int l = 1; l <= d; ++l) {
    if (!seen[static_cast<std::size_t>(l)]) fail("empty subdomain " + std::to_string(l));
  }
  AreaGraph out = *this;
  out.labels_ = std::move(labels);
  out.num_labels_ = d;
  return out;
}

AreaGraph AreaGraph::with_coordinates(std::vector<Point2> coords) const {
  if (static_cast<Index>(coords.size()) != size()) fail("coordinate count does not match graph");
  AreaGraph out = *this;
  out.coords_ = std::move(coords);
  return out;
}

std::vector<int> AreaGraph::components(int *count) const {
  std::vector<int> comp(ids_.size(), -1);
  int c = 0;
  std::vector<Index> stack;
  for (Index s = 0; s < size(); ++s) {
    if (comp[static_cast<std::size_t>(s)] >= 0) continue;
    comp[static_cast<std::size_t>(s)] = c;
    stack.push_back(s);
    while (!stack.empty()) {
      Index v = stack.back();
      stack.pop_back();
      for (Index w : neighbours(v)) {
        if (comp[static_cast<std::size_t>(w)] < 0) {
          comp[static_cast<std::size_t>(w)] = c;
          stack.push_back(w);
        }
      }
    }
    ++c;
  }
  if (count) *count = c;
  return comp;
}

AreaGraph AreaGraph::induced(std::span<const Index> areas) const {
  std::vector<Index> local(ids_.size(), -1);
  std::vector<std::string> ids;
  ids.reserve(areas.size());
  for (std::size_t j = 0; j < areas.size(); ++j) {
    local[static_cast<std::size_t>(areas[j])] = static_cast<Index>(j);
    ids.push_back(id(areas[j]));
  }
  std::vector<Edge> edges;
  for (std::size_t j = 0; j < areas.size(); ++j) {
    for (Index w : neighbours(areas[j])) {
      Index lw = local[static_cast<std::size_t>(w)];
      if (lw > static_cast<Index>(j)) edges.emplace_back(static_cast<Index>(j), lw);
    }
  }
  AreaGraph out(std::move(ids), std::move(edges));
  if (has_coordinates()) {
    std::vector<Point2> c;
    for (Index a : areas) c.push_back(coords_[static_cast<std::size_t>(a)]);
    out = out.with_coordinates(std::move(c));
  }
  return out;
}

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::ifstream open_input(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open '" + path + "'");
  return in;
}

}  // namespace

AreaGraph read_edge_list(std::istream &in) {
  std::vector<std::string> ids;
  std::unordered_map<std::string, Index> index;
  auto intern = [&](const std::string &id) {
    auto [it, inserted] = index.emplace(id, static_cast<Index>(ids.size()));
    if (inserted) ids.push_back(id);
    return it->second;
  };
  std::vector<Edge> edges;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      // A lone id declares an isolated area.
      intern(line);
      continue;
    }
    std::string a = trim(line.substr(0, tab));
    std::string b = trim(line.substr(tab + 1));
    if (a.empty() || b.empty() || b.find('\t') != std::string::npos) {
      fail("malformed edge on line " + std::to_string(lineno));
    }
    if (a == b) fail("self-loop on area '" + a + "' (line " + std::to_string(lineno) + ")");
    Index ia = intern(a);
    Index ib = intern(b);
    edges.emplace_back(ia, ib);
  }
  return AreaGraph(std::move(ids), std::move(edges));
}

AreaGraph read_edge_list_file(const std::string &path) {
  auto in = open_input(path);
  return read_edge_list(in);
}

AreaGraph read_dense_adjacency(std::istream &in) {
  auto rows = read_csv(in);
  if (rows.empty()) fail("empty adjacency matrix");
  std::vector<std::string> ids(rows[0].begin() + 1, rows[0].end());
  const std::size_t n = ids.size();
  if (rows.size() != n + 1) fail("adjacency matrix is not square");
  std::vector<std::vector<int>> m(n, std::vector<int>(n, 0));
  for (std::size_t r = 0; r < n; ++r) {
    const auto &row = rows[r + 1];
    if (row.size() != n + 1) fail("adjacency matrix is not square");
    if (trim(row[0]) != trim(ids[r])) fail("row header '" + row[0] + "' does not match column order");
    for (std::size_t c = 0; c < n; ++c) {
      std::string v = trim(row[c + 1]);
      if (v == "0") m[r][c] = 0;
      else if (v == "1") m[r][c] = 1;
      else fail("adjacency entries must be 0 or 1");
    }
  }
  std::vector<Edge> edges;
  for (std::size_t r = 0; r < n; ++r) {
    if (m[r][r] != 0) fail("nonzero diagonal in adjacency matrix");
    for (std::size_t c = r + 1; c < n; ++c) {
      if (m[r][c] != m[c][r]) fail("asymmetric adjacency between '" + ids[r] + "' and '" + ids[c] + "'");
      if (m[r][c]) edges.emplace_back(static_cast<Index>(r), static_cast<Index>(c));
    }
  }
  for (auto &id : ids) id = trim(id);
  return AreaGraph(std::move(ids), std::move(edges));
}

AreaGraph read_dense_adjacency_file(const std::string &path) {
  auto in = open_input(path);
  return read_dense_adjacency(in);
}

AreaGraph load_adjacency(const std::string &path) {
  auto ends_with = [&](std::string_view suffix) {
    return path.size() >= suffix.size() &&
           path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with(".csv")) return read_dense_adjacency_file(path);
  if (ends_with(".geojson") || ends_with(".json")) {
    auto in = open_input(path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception &e) {
      fail(std::string("invalid GeoJSON: ") + e.what());
    }
    return derive_contiguity(j);
  }
  return read_edge_list_file(path);
}

std::vector<int> read_partition(std::istream &in, const AreaGraph &g) {
  auto rows = read_csv(in);
  std::vector<int> labels(static_cast<std::size_t>(g.size()), 0);
  std::size_t start = 0;
  if (!rows.empty() && rows[0].size() == 2) {
    try {
      (void)std::stoi(rows[0][1]);
    } catch (...) {
      start = 1;  // header line
    }
  }
  for (std::size_t r = start; r < rows.size(); ++r) {
    if (rows[r].size() != 2) fail("partition rows must be area_id,subdomain");
    auto idx = g.index_of(trim(rows[r][0]));
    if (!idx) fail("partition references unknown area '" + rows[r][0] + "'");
    int label = 0;
    try {
      label = std::stoi(rows[r][1]);
    } catch (...) {
      fail("invalid subdomain label '" + rows[r][1] + "'");
    }
    if (labels[static_cast<std::size_t>(*idx)] != 0) fail("area '" + rows[r][0] + "' assigned twice");
    labels[static_cast<std::size_t>(*idx)] = label;
  }
  for (Index i = 0; i < g.size(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == 0) fail("area '" + g.id(i) + "' has no subdomain");
  }
  return labels;
}

std::vector<int> read_partition_file(const std::string &path, const AreaGraph &g) {
  auto in = open_input(path);
  return read_partition(in, g);
}

void write_edge_list(std::ostream &out, const AreaGraph &g) {
  std::vector<bool> touched(static_cast<std::size_t>(g.size()), false);
  for (auto [a, b] : g.edges()) {
    out << g.id(a) << '\t' << g.id(b) << '\n';
    touched[static_cast<std::size_t>(a)] = touched[static_cast<std::size_t>(b)] = true;
  }
  for (Index i = 0; i < g.size(); ++i) {
    if (!touched[static_cast<std::size_t>(i)]) out << g.id(i) << '\n';
  }
}

void write_partition(std::ostream &out, const AreaGraph &g) {
  out << "area_id,subdomain\n";
  for (Index i = 0; i < g.size(); ++i) out << g.id(i) << ',' << g.label(i) << '\n';
}

namespace {

using VertexKey = std::pair<long long, long long>;

VertexKey quantize(const nlohmann::json &pt) {
  if (!pt.is_array() || pt.size() < 2) fail("invalid coordinate in geometry");
  constexpr double scale = 1e9;
  return {std::llround(pt[0].get<double>() * scale), std::llround(pt[1].get<double>() * scale)};
}

// Exterior and interior rings of a Polygon or MultiPolygon geometry.
std::vector<const nlohmann::json *> rings_of(const nlohmann::json &geometry) {
  std::vector<const nlohmann::json *> rings;
  const std::string type = geometry.value("type", "");
  const auto &coords = geometry.at("coordinates");
  if (type == "Polygon") {
    for (const auto &ring : coords) rings.push_back(&ring);
  } else if (type == "MultiPolygon") {
    for (const auto &poly : coords)
      for (const auto &ring : poly) rings.push_back(&ring);
  } else {
    fail("non-polygon geometry '" + type + "'");
  }
  return rings;
}

// Area-weighted centroid over the exterior rings; falls back to the vertex mean
// for degenerate rings.
Point2 centroid_of(const nlohmann::json &geometry) {
  std::vector<const nlohmann::json *> exteriors;
  const std::string type = geometry.value("type", "");
  const auto &coords = geometry.at("coordinates");
  if (type == "Polygon") {
    exteriors.push_back(&coords.at(0));
  } else {
    for (const auto &poly : coords) exteriors.push_back(&poly.at(0));
  }
  double a_sum = 0, cx = 0, cy = 0, mx = 0, my = 0;
  std::size_t count = 0;
  for (const auto *ring : exteriors) {
    for (std::size_t k = 0; k + 1 < ring->size(); ++k) {
      double x0 = (*ring)[k][0], y0 = (*ring)[k][1];
      double x1 = (*ring)[k + 1][0], y1 = (*ring)[k + 1][1];
      double cross = x0 * y1 - x1 * y0;
      a_sum += cross;
      cx += (x0 + x1) * cross;
      cy += (y0 + y1) * cross;
      mx += x0;
      my += y0;
      ++count;
    }
  }
  if (std::abs(a_sum) > 1e-300) return {cx / (3 * a_sum), cy / (3 * a_sum)};
  if (count == 0) return {};
  return {mx / static_cast<double>(count), my / static_cast<double>(count)};
}

}  // namespace

AreaGraph derive_contiguity(const nlohmann::json &fc, const std::string &id_key, ContiguityRule rule) {
  const nlohmann::json &features = fc.is_array() ? fc : fc.at("features");
  std::vector<std::string> ids;
  std::vector<Point2> centroids;
  // Boundary segment (or vertex, for queen) -> owning features.
  std::map<std::pair<VertexKey, VertexKey>, std::vector<Index>> segments;
  std::map<VertexKey, std::vector<Index>> vertices;
  for (const auto &f : features) {
    const auto props = f.value("properties", nlohmann::json::object());
    if (!props.contains(id_key) || props[id_key].is_null()) fail("feature without '" + id_key + "' property");
    const auto &pid = props[id_key];
    std::string id = pid.is_string() ? pid.get<std::string>() : pid.dump();
    if (!f.contains("geometry") || f["geometry"].is_null()) fail("feature '" + id + "' has no geometry");
    const Index me = static_cast<Index>(ids.size());
    ids.push_back(id);
    centroids.push_back(centroid_of(f["geometry"]));
    for (const auto *ring : rings_of(f["geometry"])) {
      std::vector<VertexKey> pts;
      for (const auto &pt : *ring) pts.push_back(quantize(pt));
      for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
        auto a = pts[k], b = pts[k + 1];
        if (a == b) continue;
        if (b < a) std::swap(a, b);
        segments[{a, b}].push_back(me);
        vertices[pts[k]].push_back(me);
      }
    }
  }
  std::set<Edge> edges;
  auto connect_all = [&](std::vector<Index> owners) {
    std::sort(owners.begin(), owners.end());
    owners.erase(std::unique(owners.begin(), owners.end()), owners.end());
    for (std::size_t p = 0; p < owners.size(); ++p)
      for (std::size_t q = p + 1; q < owners.size(); ++q) edges.emplace(owners[p], owners[q]);
  };
  if (rule == ContiguityRule::Rook) {
    for (auto &[seg, owners] : segments) connect_all(owners);
  } else {
    for (auto &[v, owners] : vertices) connect_all(owners);
  }
  AreaGraph g(std::move(ids), std::vector<Edge>(edges.begin(), edges.end()));
  return g.with_coordinates(std::move(centroids));
}

IslandBridging connect_islands(const AreaGraph &g) {
  int count = 0;
  auto comp = g.components(&count);
  if (count <= 1) return {g, {}};
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(count));
  for (Index i = 0; i < g.size(); ++i) members[static_cast<std::size_t>(comp[static_cast<std::size_t>(i)])].push_back(i);
  // Largest component, ties to the lowest component number.
  std::size_t main = 0;
  for (std::size_t c = 1; c < members.size(); ++c) {
    if (members[c].size() > members[main].size()) main = c;
  }
  std::vector<Edge> edges = g.edges();
  std::vector<Edge> added;
  for (std::size_t c = 0; c < members.size(); ++c) {
    if (c == main) continue;
    Edge best{-1, -1};
    if (g.has_coordinates()) {
      double best_d = std::numeric_limits<double>::infinity();
      for (Index a : members[c]) {
        for (Index b : members[main]) {
          const auto &pa = g.coordinates()[static_cast<std::size_t>(a)];
          const auto &pb = g.coordinates()[static_cast<std::size_t>(b)];
          double d = std::hypot(pa.x - pb.x, pa.y - pb.y);
          if (d < best_d) {
            best_d = d;
            best = {a, b};
          }
        }
      }
    } else {
      std::pair<std::string, std::string> best_key;
      for (Index a : members[c]) {
        for (Index b : members[main]) {
          auto key = std::minmax(g.id(a), g.id(b));
          std::pair<std::string, std::string> k2{key.first, key.second};
          if (best.first < 0 || k2 < best_key) {
            best_key = k2;
            best = {a, b};
          }
        }
      }
    }
    if (best.first > best.second) std::swap(best.first, best.second);
    edges.push_back(best);
    added.push_back(best);
  }
  AreaGraph out(g.ids(), std::move(edges));
  if (g.has_coordinates()) out = out.with_coordinates(g.coordinates());
  if (g.has_partition()) out = out.with_partition(g.labels());
  return {std::move(out), std::move(added)};
}

Subdomain expand_korder(const AreaGraph &g, int label, int k) {
  if (!g.has_partition()) fail("graph has no partition");
  if (k < 0) fail("neighbourhood order must be non-negative");
  if (label < 1 || label > g.num_subdomains()) fail("unknown subdomain label " + std::to_string(label));
  std::vector<int> dist(static_cast<std::size_t>(g.size()), -1);
  std::deque<Index> queue;
  Subdomain sd;
  sd.label = label;
  sd.k = k;
  for (Index i = 0; i < g.size(); ++i) {
    if (g.label(i) == label) {
      dist[static_cast<std::size_t>(i)] = 0;
      queue.push_back(i);
      sd.core.push_back(i);
    }
  }
  while (!queue.empty()) {
    Index v = queue.front();
    queue.pop_front();
    int dv = dist[static_cast<std::size_t>(v)];
    if (dv == k) continue;
    for (Index w : g.neighbours(v)) {
      if (dist[static_cast<std::size_t>(w)] < 0) {
        dist[static_cast<std::size_t>(w)] = dv + 1;
        queue.push_back(w);
        sd.halo.push_back(w);
      }
    }
  }
  std::sort(sd.halo.begin(), sd.halo.end());
  sd.areas.reserve(sd.core.size() + sd.halo.size());
  std::merge(sd.core.begin(), sd.core.end(), sd.halo.begin(), sd.halo.end(), std::back_inserter(sd.areas));
  for (Index a : sd.areas) sd.core_mask.push_back(g.label(a) == label);
  sd.graph = g.induced(sd.areas);
  sd.graph.components(&sd.components);
  return sd;
}

std::vector<Index> border_units(const AreaGraph &g) {
  if (!g.has_partition()) fail("graph has no partition");
  std::vector<Index> out;
  for (Index i = 0; i < g.size(); ++i) {
    for (Index w : g.neighbours(i)) {
      if (g.label(w) != g.label(i)) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

}  // namespace dacmap
