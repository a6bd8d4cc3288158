#pragma once

// Gridworld environments: FrozenLake, Pachinko, double-slit and four rooms.
// Each builds a GridSpec (the map) and, through make_world, the matching
// exact TabularMDP. The step simulator samples from that same tensor, so
// simulated and exact dynamics agree by construction.

#include <compare>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "mselab/mdp.hpp"
#include "mselab/random.hpp"

namespace mselab {

struct Cell {
  int x = 0;  // column, 0 = left
  int y = 0;  // row, 0 = top
  auto operator<=>(const Cell&) const = default;
};

enum Action : int { kLeft = 0, kDown = 1, kRight = 2, kUp = 3 };
inline constexpr int kNumGridActions = 4;

struct GridSpec {
  std::string name = "grid";
  int width = 0;
  int height = 0;
  std::set<Cell> walls;
  // Absorbing cells that end the episode without reward (FrozenLake holes).
  std::set<Cell> holes;
  // Start distribution; cells listed once each.
  std::vector<std::pair<Cell, double>> start;
  std::optional<Cell> goal;
  double step_reward = 0.0;
  double goal_reward = 1.0;
  // Probability mass moved off the intended direction, split evenly between
  // the two perpendicular moves.
  double slip_prob = 0.0;
  int max_episode_steps = 100;

  bool in_bounds(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width && c.y < height; }
  bool is_wall(Cell c) const { return walls.contains(c); }
  bool is_terminal(Cell c) const { return holes.contains(c) || (goal && *goal == c); }
};

/// Throws DomainError when the spec is inconsistent (start/goal on walls or
/// out of bounds, bad slip probability, ...).
void validate(const GridSpec& spec);

/// Bijection between non-wall cells and state indices (row-major order).
class GridIndex {
 public:
  explicit GridIndex(const GridSpec& spec);

  int num_states() const { return static_cast<int>(cells_.size()); }
  /// -1 for walls and out-of-bounds cells.
  int state_of(Cell c) const;
  Cell cell_of(int state) const { return cells_.at(static_cast<std::size_t>(state)); }

 private:
  int width_;
  int height_;
  std::vector<int> state_by_cell_;
  std::vector<Cell> cells_;
};

/// Cell reached by a deterministic move; bumping into a wall or the border stays put.
Cell move(const GridSpec& spec, Cell from, int action);

struct GridWorld {
  GridSpec spec;
  GridIndex index;
  TabularMDP mdp;
};

GridWorld make_world(GridSpec spec, double discount = 0.99);

GridSpec frozen_lake_spec(int size, bool slippery);
/// Standard 4x4 / 8x8 maps; slippery => 1/3 intended, 1/3 each perpendicular.
GridWorld frozen_lake(int size, bool slippery, double discount = 0.99);

/// Open grid with staggered single-cell walls. Wall rows are those with
/// y mod period == period-1; within the k-th wall row the walls sit at
/// (x - shift) mod period == period-1 where shift = period/2 for odd k.
GridSpec pachinko(int width = 21, int height = 21, int wall_period = 3);
/// Closed-form wall count of the pachinko stagger pattern.
int pachinko_wall_count(int width, int height, int wall_period);

/// Three rooms side by side inside a border wall, separated by vertical
/// walls with a centered door. Start bottom-left, goal top-right.
GridSpec double_slit(int room_size = 7, int door_width = 1, int room_count = 3);
/// x coordinates of the internal separating walls of a double-slit spec.
std::vector<int> double_slit_wall_columns(int room_size, int room_count = 3);

/// Cross of walls with one doorway per arm; start bottom-left, goal top-right.
GridSpec four_rooms(int size = 11);

/// BFS distances over non-wall cells (4-neighbourhood); -1 when unreachable.
std::vector<int> bfs_distances(const GridSpec& spec, const GridIndex& index, Cell from);

/// States reachable from the support of alpha through positive-probability transitions.
std::vector<bool> reachable_states(const TabularMDP& mdp);

// Layout maps: '#' wall, '.' floor, 'S' start, 'G' goal, 'H' hole.
std::string format_layout(const GridSpec& spec);
/// Parses a map into a spec with default rewards/slip; multiple 'S' cells
/// give a uniform start distribution.
GridSpec parse_layout(const std::string& text, std::string name = "layout");

struct EnvStep {
  int next_state = 0;
  double reward = 0.0;
  bool done = false;
  // done because of the step limit rather than a terminal cell
  bool truncated = false;
  int step_count = 0;
};

/// Step simulator over a GridWorld. Owns its RNG and episode cursor.
class GridEnv {
 public:
  GridEnv(GridWorld world, std::uint64_t seed);

  int reset();
  EnvStep step(int action);

  int state() const { return state_; }
  bool episode_active() const { return active_; }
  const GridWorld& world() const { return world_; }
  int num_states() const { return world_.index.num_states(); }
  int num_actions() const { return kNumGridActions; }

 private:
  GridWorld world_;
  Rng rng_;
  int state_ = -1;
  int steps_ = 0;
  bool active_ = false;
  std::optional<int> goal_state_;
};

}  // namespace mselab
