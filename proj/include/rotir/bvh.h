#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "rotir/aabb.h"

namespace rotir {

// Binary BVH over a list of primitive bounds, built by splitting at the median
// along the widest centroid axis. Construction is deterministic: equal
// centroids order by primitive index via stable nth_element key.
class Bvh {
 public:
  struct Node {
    Aabb bounds;
    uint32_t left = 0;    // index of first child (internal) or first prim (leaf)
    uint16_t count = 0;   // primitive count; 0 marks an internal node
    uint16_t axis = 0;
  };

  Bvh() = default;

  explicit Bvh(const std::vector<Aabb>& prim_bounds, int leaf_size = 4) {
    build(prim_bounds, leaf_size);
  }

  void build(const std::vector<Aabb>& prim_bounds, int leaf_size = 4) {
    nodes_.clear();
    order_.resize(prim_bounds.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (prim_bounds.empty()) return;

    std::vector<Vec3> centers(prim_bounds.size());
    for (size_t i = 0; i < prim_bounds.size(); ++i) centers[i] = prim_bounds[i].center();

    nodes_.reserve(2 * prim_bounds.size());
    nodes_.push_back({});
    build_node(0, 0, static_cast<uint32_t>(order_.size()), prim_bounds, centers,
               std::max(leaf_size, 1));

    leaf_bounds_.resize(order_.size());
    for (size_t i = 0; i < order_.size(); ++i) leaf_bounds_[i] = prim_bounds[order_[i]];
  }

  bool empty() const { return nodes_.empty(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<uint32_t>& order() const { return order_; }
  Aabb bounds() const { return nodes_.empty() ? Aabb{} : nodes_[0].bounds; }

  // Visits primitives whose bounds overlap the ray within [ray.t_min, t_max].
  // visit(prim) may shrink t_max by returning a smaller value (closest-hit
  // searches) or leave it unchanged (any-hit / collect-all).
  template <typename Visit>
  void traverse(const Ray& ray, double t_max, Visit&& visit) const {
    if (nodes_.empty()) return;
    uint32_t stack[64];
    int sp = 0;
    stack[sp++] = 0;
    while (sp > 0) {
      const Node& node = nodes_[stack[--sp]];
      if (!node.bounds.hit(ray, ray.t_min, t_max)) continue;
      if (node.count > 0) {
        for (uint16_t i = 0; i < node.count; ++i) {
          if (!leaf_bounds_[node.left + i].hit(ray, ray.t_min, t_max)) continue;
          t_max = visit(order_[node.left + i], t_max);
        }
      } else {
        // Near child first so closest-hit searches can prune the far side.
        const bool flip = ray.dir.vec()[node.axis] < 0.0;
        stack[sp++] = node.left + (flip ? 0u : 1u);
        stack[sp++] = node.left + (flip ? 1u : 0u);
      }
    }
  }

  // Visits primitives whose bounds contain the point.
  template <typename Visit>
  void query_point(const Vec3& p, Visit&& visit) const {
    if (nodes_.empty()) return;
    uint32_t stack[64];
    int sp = 0;
    stack[sp++] = 0;
    while (sp > 0) {
      const Node& node = nodes_[stack[--sp]];
      if (!node.bounds.contains(p)) continue;
      if (node.count > 0) {
        for (uint16_t i = 0; i < node.count; ++i) {
          if (leaf_bounds_[node.left + i].contains(p)) visit(order_[node.left + i]);
        }
      } else {
        stack[sp++] = node.left;
        stack[sp++] = node.left + 1;
      }
    }
  }

 private:
  void build_node(uint32_t node_idx, uint32_t begin, uint32_t end,
                  const std::vector<Aabb>& prim_bounds, const std::vector<Vec3>& centers,
                  int leaf_size) {
    Aabb bounds;
    Aabb cbounds;
    for (uint32_t i = begin; i < end; ++i) {
      bounds.expand(prim_bounds[order_[i]]);
      cbounds.expand(centers[order_[i]]);
    }
    nodes_[node_idx].bounds = bounds;

    const uint32_t n = end - begin;
    if (n <= static_cast<uint32_t>(leaf_size)) {
      nodes_[node_idx].left = begin;
      nodes_[node_idx].count = static_cast<uint16_t>(n);
      return;
    }

    const Vec3 ce = cbounds.extent();
    const int axis = (ce.x >= ce.y && ce.x >= ce.z) ? 0 : (ce.y >= ce.z ? 1 : 2);
    const uint32_t mid = begin + n / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](uint32_t a, uint32_t b) {
                       const double ca = centers[a][axis], cb = centers[b][axis];
                       return ca < cb || (ca == cb && a < b);
                     });

    const uint32_t left = static_cast<uint32_t>(nodes_.size());
    nodes_[node_idx].left = left;
    nodes_[node_idx].count = 0;
    nodes_[node_idx].axis = static_cast<uint16_t>(axis);
    nodes_.push_back({});
    nodes_.push_back({});
    build_node(left, begin, mid, prim_bounds, centers, leaf_size);
    build_node(left + 1, mid, end, prim_bounds, centers, leaf_size);
  }

  std::vector<Node> nodes_;
  std::vector<uint32_t> order_;
  std::vector<Aabb> leaf_bounds_;  // primitive bounds in leaf order
};

}  // namespace rotir
