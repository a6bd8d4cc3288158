#include "mselab/gridworld.hpp"

#include <deque>
#include <sstream>

#include "mselab/error.hpp"

namespace mselab {
namespace {

constexpr const char* kFrozenLake4[] = {
    "SFFF",
    "FHFH",
    "FFFH",
    "HFFG",
};

constexpr const char* kFrozenLake8[] = {
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
};

void add_border(GridSpec& spec) {
  for (int x = 0; x < spec.width; ++x) {
    spec.walls.insert({x, 0});
    spec.walls.insert({x, spec.height - 1});
  }
  for (int y = 0; y < spec.height; ++y) {
    spec.walls.insert({0, y});
    spec.walls.insert({spec.width - 1, y});
  }
}

}  // namespace

void validate(const GridSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0) throw DomainError(spec.name + ": grid must be non-empty");
  if (spec.max_episode_steps <= 0) throw DomainError(spec.name + ": max_episode_steps must be positive");
  if (!(spec.slip_prob >= 0.0 && spec.slip_prob <= 1.0)) throw DomainError(spec.name + ": slip_prob outside [0,1]");
  for (const Cell& w : spec.walls) {
    if (!spec.in_bounds(w)) throw DomainError(spec.name + ": wall out of bounds");
  }
  for (const Cell& h : spec.holes) {
    if (!spec.in_bounds(h) || spec.is_wall(h)) throw DomainError(spec.name + ": hole on wall or out of bounds");
  }
  if (spec.start.empty()) throw DomainError(spec.name + ": no start cell");
  double total = 0.0;
  std::set<Cell> seen;
  for (const auto& [cell, p] : spec.start) {
    if (!spec.in_bounds(cell) || spec.is_wall(cell)) throw DomainError(spec.name + ": start on wall or out of bounds");
    if (spec.is_terminal(cell)) throw DomainError(spec.name + ": start on a terminal cell");
    if (!(p > 0.0)) throw DomainError(spec.name + ": start probabilities must be positive");
    if (!seen.insert(cell).second) throw DomainError(spec.name + ": duplicate start cell");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError(spec.name + ": start distribution must sum to 1");
  if (spec.goal && (!spec.in_bounds(*spec.goal) || spec.is_wall(*spec.goal))) {
    throw DomainError(spec.name + ": goal on wall or out of bounds");
  }
}

// --- GridIndex --------------------------------------------------------------

GridIndex::GridIndex(const GridSpec& spec)
    : width_(spec.width),
      height_(spec.height),
      state_by_cell_(static_cast<std::size_t>(spec.width) * spec.height, -1) {
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      if (spec.is_wall({x, y})) continue;
      state_by_cell_[static_cast<std::size_t>(y) * width_ + x] = static_cast<int>(cells_.size());
      cells_.push_back({x, y});
    }
  }
}

int GridIndex::state_of(Cell c) const {
  if (c.x < 0 || c.y < 0 || c.x >= width_ || c.y >= height_) return -1;
  return state_by_cell_[static_cast<std::size_t>(c.y) * width_ + c.x];
}

// --- dynamics ---------------------------------------------------------------

Cell move(const GridSpec& spec, Cell from, int action) {
  Cell to = from;
  switch (action) {
    case kLeft: to.x -= 1; break;
    case kDown: to.y += 1; break;
    case kRight: to.x += 1; break;
    case kUp: to.y -= 1; break;
    default: throw DomainError("grid action out of range: " + std::to_string(action));
  }
  if (!spec.in_bounds(to) || spec.is_wall(to)) return from;
  return to;
}

GridWorld make_world(GridSpec spec, double discount) {
  validate(spec);
  GridIndex index(spec);
  const int n = index.num_states();
  const int na = kNumGridActions;
  std::vector<double> transitions(static_cast<std::size_t>(n) * na * n, 0.0);
  Matrix rewards = Matrix::Zero(n, na);
  const double perpendicular = spec.slip_prob / 2.0;

  for (int s = 0; s < n; ++s) {
    const Cell cell = index.cell_of(s);
    for (int a = 0; a < na; ++a) {
      double* row = transitions.data() + (static_cast<std::size_t>(s) * na + a) * n;
      if (spec.is_terminal(cell)) {
        row[s] = 1.0;
        continue;
      }
      const std::pair<int, double> outcomes[] = {
          {a, 1.0 - spec.slip_prob},
          {(a + 3) % na, perpendicular},
          {(a + 1) % na, perpendicular},
      };
      for (const auto& [dir, p] : outcomes) {
        if (p == 0.0) continue;
        row[index.state_of(move(spec, cell, dir))] += p;
      }
      double reward = spec.step_reward;
      if (spec.goal) reward += spec.goal_reward * row[index.state_of(*spec.goal)];
      rewards(s, a) = reward;
    }
  }

  Vector start = Vector::Zero(n);
  for (const auto& [cell, p] : spec.start) start[index.state_of(cell)] += p;
  TabularMDP mdp(n, na, std::move(transitions), std::move(rewards), std::move(start), discount);
  return {std::move(spec), std::move(index), std::move(mdp)};
}

// --- environments -----------------------------------------------------------

GridSpec frozen_lake_spec(int size, bool slippery) {
  std::vector<std::string> rows;
  if (size == 4) {
    rows.assign(std::begin(kFrozenLake4), std::end(kFrozenLake4));
  } else if (size == 8) {
    rows.assign(std::begin(kFrozenLake8), std::end(kFrozenLake8));
  } else {
    throw DomainError("FrozenLake size must be 4 or 8, got " + std::to_string(size));
  }
  GridSpec spec;
  spec.name = "frozen_lake_" + std::to_string(size) + "x" + std::to_string(size);
  spec.width = size;
  spec.height = size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      switch (rows[y][x]) {
        case 'S': spec.start = {{{x, y}, 1.0}}; break;
        case 'G': spec.goal = Cell{x, y}; break;
        case 'H': spec.holes.insert({x, y}); break;
        default: break;
      }
    }
  }
  spec.goal_reward = 1.0;
  spec.step_reward = 0.0;
  spec.slip_prob = slippery ? 2.0 / 3.0 : 0.0;
  spec.max_episode_steps = 100;
  return spec;
}

GridWorld frozen_lake(int size, bool slippery, double discount) {
  return make_world(frozen_lake_spec(size, slippery), discount);
}

GridSpec pachinko(int width, int height, int wall_period) {
  if (wall_period < 2) throw DomainError("pachinko wall_period must be >= 2");
  if (width < 2 || height < 2) throw DomainError("pachinko grid must be at least 2x2");
  GridSpec spec;
  spec.name = "pachinko";
  spec.width = width;
  spec.height = height;
  for (int y = wall_period - 1; y < height; y += wall_period) {
    const int shift = (y / wall_period) % 2 == 1 ? wall_period / 2 : 0;
    for (int x = 0; x < width; ++x) {
      if (((x - shift) % wall_period + wall_period) % wall_period == wall_period - 1) spec.walls.insert({x, y});
    }
  }
  spec.start = {{{width / 2, 0}, 1.0}};
  spec.goal_reward = 0.0;
  spec.step_reward = 0.0;
  spec.max_episode_steps = 200;
  return spec;
}

int pachinko_wall_count(int width, int height, int wall_period) {
  int total = 0;
  for (int k = 0; k * wall_period + wall_period - 1 < height; ++k) {
    const int shift = k % 2 == 1 ? wall_period / 2 : 0;
    const int first = (wall_period - 1 + shift) % wall_period;
    if (first < width) total += (width - 1 - first) / wall_period + 1;
  }
  return total;
}

std::vector<int> double_slit_wall_columns(int room_size, int room_count) {
  std::vector<int> columns;
  for (int i = 0; i + 1 < room_count; ++i) columns.push_back(1 + (i + 1) * room_size + i);
  return columns;
}

GridSpec double_slit(int room_size, int door_width, int room_count) {
  if (room_size < 3) throw DomainError("double_slit room_size must be >= 3");
  if (room_count < 2) throw DomainError("double_slit needs at least two rooms");
  if (door_width < 1) throw DomainError("double_slit door_width must be >= 1");
  if (door_width > room_size) throw DomainError("double_slit door wider than the wall");
  GridSpec spec;
  spec.name = "double_slit";
  spec.width = room_count * room_size + (room_count - 1) + 2;
  spec.height = room_size + 2;
  add_border(spec);
  const int door_begin = 1 + (room_size - door_width) / 2;
  for (int column : double_slit_wall_columns(room_size, room_count)) {
    for (int y = 1; y <= room_size; ++y) {
      if (y >= door_begin && y < door_begin + door_width) continue;
      spec.walls.insert({column, y});
    }
  }
  spec.start = {{{1, spec.height - 2}, 1.0}};
  spec.goal = Cell{spec.width - 2, 1};
  spec.goal_reward = 1.0;
  spec.step_reward = 0.0;
  spec.max_episode_steps = 200;
  return spec;
}

GridSpec four_rooms(int size) {
  if (size < 7 || size % 2 == 0) throw DomainError("four_rooms size must be odd and >= 7");
  GridSpec spec;
  spec.name = "four_rooms";
  spec.width = size;
  spec.height = size;
  const int mid = size / 2;
  const int near_door = mid / 2;
  const int far_door = mid + 1 + mid / 2;
  for (int i = 0; i < size; ++i) {
    spec.walls.insert({mid, i});
    spec.walls.insert({i, mid});
  }
  for (int door : {near_door, far_door}) {
    spec.walls.erase({mid, door});
    spec.walls.erase({door, mid});
  }
  spec.start = {{{0, size - 1}, 1.0}};
  spec.goal = Cell{size - 1, 0};
  spec.goal_reward = 1.0;
  spec.step_reward = 0.0;
  spec.max_episode_steps = 500;
  return spec;
}

// --- graph utilities --------------------------------------------------------

std::vector<int> bfs_distances(const GridSpec& spec, const GridIndex& index, Cell from) {
  std::vector<int> dist(static_cast<std::size_t>(index.num_states()), -1);
  const int source = index.state_of(from);
  if (source < 0) return dist;
  std::deque<int> frontier{source};
  dist[source] = 0;
  while (!frontier.empty()) {
    const int s = frontier.front();
    frontier.pop_front();
    for (int a = 0; a < kNumGridActions; ++a) {
      const int next = index.state_of(move(spec, index.cell_of(s), a));
      if (dist[next] < 0) {
        dist[next] = dist[s] + 1;
        frontier.push_back(next);
      }
    }
  }
  return dist;
}

std::vector<bool> reachable_states(const TabularMDP& mdp) {
  const int n = mdp.num_states();
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::deque<int> frontier;
  for (int s = 0; s < n; ++s) {
    if (mdp.start_dist()[s] > 0.0) {
      seen[s] = true;
      frontier.push_back(s);
    }
  }
  while (!frontier.empty()) {
    const int s = frontier.front();
    frontier.pop_front();
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const auto row = mdp.next_state_dist(s, a);
      for (int next = 0; next < n; ++next) {
        if (row[next] > 0.0 && !seen[next]) {
          seen[next] = true;
          frontier.push_back(next);
        }
      }
    }
  }
  return seen;
}

// --- layout maps ------------------------------------------------------------

std::string format_layout(const GridSpec& spec) {
  std::vector<std::string> rows(static_cast<std::size_t>(spec.height), std::string(spec.width, '.'));
  for (const Cell& w : spec.walls) rows[w.y][w.x] = '#';
  for (const Cell& h : spec.holes) rows[h.y][h.x] = 'H';
  for (const auto& [cell, p] : spec.start) rows[cell.y][cell.x] = 'S';
  if (spec.goal) rows[spec.goal->y][spec.goal->x] = 'G';
  std::string out;
  for (const auto& row : rows) out += row + '\n';
  return out;
}

GridSpec parse_layout(const std::string& text, std::string name) {
  std::istringstream in(text);
  std::vector<std::string> rows;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(line);
  }
  if (rows.empty()) throw DomainError(name + ": empty layout");
  GridSpec spec;
  spec.name = std::move(name);
  spec.width = static_cast<int>(rows.front().size());
  spec.height = static_cast<int>(rows.size());
  std::vector<Cell> starts;
  for (int y = 0; y < spec.height; ++y) {
    if (static_cast<int>(rows[y].size()) != spec.width) {
      throw DomainError(spec.name + ": ragged layout at row " + std::to_string(y + 1));
    }
    for (int x = 0; x < spec.width; ++x) {
      switch (rows[y][x]) {
        case '#': spec.walls.insert({x, y}); break;
        case '.': break;
        case 'S': starts.push_back({x, y}); break;
        case 'G':
          if (spec.goal) throw DomainError(spec.name + ": more than one goal");
          spec.goal = Cell{x, y};
          break;
        case 'H': spec.holes.insert({x, y}); break;
        default:
          throw DomainError(spec.name + ": unknown layout character '" + std::string(1, rows[y][x]) +
                            "' at row " + std::to_string(y + 1));
      }
    }
  }
  for (const Cell& c : starts) spec.start.emplace_back(c, 1.0 / static_cast<double>(starts.size()));
  validate(spec);
  return spec;
}

// --- simulator --------------------------------------------------------------

GridEnv::GridEnv(GridWorld world, std::uint64_t seed) : world_(std::move(world)), rng_(seed) {
  if (world_.spec.goal) goal_state_ = world_.index.state_of(*world_.spec.goal);
}

int GridEnv::reset() {
  const Vector& alpha = world_.mdp.start_dist();
  state_ = sample_categorical({alpha.data(), static_cast<std::size_t>(alpha.size())}, rng_);
  steps_ = 0;
  active_ = true;
  return state_;
}

EnvStep GridEnv::step(int action) {
  if (!active_) throw UsageError("step called without an active episode; call reset first");
  if (action < 0 || action >= kNumGridActions) throw DomainError("action out of range: " + std::to_string(action));
  const int next = sample_categorical(world_.mdp.next_state_dist(state_, action), rng_);
  EnvStep out;
  out.next_state = next;
  out.reward = world_.spec.step_reward;
  if (goal_state_ && next == *goal_state_) out.reward += world_.spec.goal_reward;
  ++steps_;
  out.step_count = steps_;
  const bool terminal = world_.spec.is_terminal(world_.index.cell_of(next));
  out.truncated = !terminal && steps_ >= world_.spec.max_episode_steps;
  out.done = terminal || out.truncated;
  state_ = next;
  active_ = !out.done;
  return out;
}

}  // namespace mselab
