#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dacmap/core.hpp"

namespace dacmap {

using Edge = std::pair<Index, Index>;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Spatial adjacency of areal units. Immutable once built; edges are stored
/// as unordered pairs with `first < second`.
class AreaGraph {
 public:
  AreaGraph() = default;
  AreaGraph(std::vector<std::string> ids, std::vector<Edge> edges);

  Index size() const { return static_cast<Index>(ids_.size()); }
  const std::vector<std::string> &ids() const { return ids_; }
  const std::string &id(Index i) const { return ids_[static_cast<std::size_t>(i)]; }
  std::optional<Index> index_of(const std::string &id) const;

  const std::vector<Edge> &edges() const { return edges_; }
  std::span<const Index> neighbours(Index i) const {
    return adjacency_[static_cast<std::size_t>(i)];
  }
  Index degree(Index i) const { return static_cast<Index>(neighbours(i).size()); }
  bool adjacent(Index a, Index b) const;

  bool has_partition() const { return !labels_.empty(); }
  int label(Index i) const { return labels_[static_cast<std::size_t>(i)]; }
  const std::vector<int> &labels() const { return labels_; }
  int num_subdomains() const { return num_labels_; }
  /// Returns a copy carrying `labels` (one per area, values 1..D, no empty label).
  AreaGraph with_partition(std::vector<int> labels) const;

  bool has_coordinates() const { return !coords_.empty(); }
  const std::vector<Point2> &coordinates() const { return coords_; }
  AreaGraph with_coordinates(std::vector<Point2> coords) const;

  /// Connected-component id per area (0-based, numbered by smallest member).
  std::vector<int> components(int *count = nullptr) const;

  /// Subgraph induced by `areas` (global indices, kept in the given order).
  AreaGraph induced(std::span<const Index> areas) const;

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, Index> index_;
  std::vector<Edge> edges_;
  std::vector<std::vector<Index>> adjacency_;
  std::vector<int> labels_;
  int num_labels_ = 0;
  std::vector<Point2> coords_;
};

/// Areas of one subdomain after k-order expansion. `areas` is sorted by
/// global index; `core_mask[j]` tells whether `areas[j]` is an original member.
struct Subdomain {
  int label = 0;
  int k = 0;
  std::vector<Index> core;
  std::vector<Index> halo;
  std::vector<Index> areas;
  std::vector<bool> core_mask;
  AreaGraph graph;
  int components = 1;
};

struct IslandBridging {
  AreaGraph graph;
  std::vector<Edge> added;
};

// Readers. Errors are reported as dacmap::Error (Validation).
AreaGraph read_edge_list(std::istream &in);
AreaGraph read_edge_list_file(const std::string &path);
AreaGraph read_dense_adjacency(std::istream &in);
AreaGraph read_dense_adjacency_file(const std::string &path);
/// Picks the reader from the extension: `.csv` dense matrix, `.geojson`/`.json`
/// polygons, anything else an edge list.
AreaGraph load_adjacency(const std::string &path);
std::vector<int> read_partition(std::istream &in, const AreaGraph &g);
std::vector<int> read_partition_file(const std::string &path, const AreaGraph &g);
void write_edge_list(std::ostream &out, const AreaGraph &g);
void write_partition(std::ostream &out, const AreaGraph &g);

enum class ContiguityRule { Rook, Queen };

/// Neighbours from polygon geometry. Rook: at least one shared boundary
/// segment (two consecutive common vertices). Queen: any shared vertex.
AreaGraph derive_contiguity(const nlohmann::json &features,
                            const std::string &id_key = "ID",
                            ContiguityRule rule = ContiguityRule::Rook);

IslandBridging connect_islands(const AreaGraph &g);
Subdomain expand_korder(const AreaGraph &g, int label, int k);
std::vector<Index> border_units(const AreaGraph &g);

}  // namespace dacmap
