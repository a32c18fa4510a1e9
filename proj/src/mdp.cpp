// SPDX-License-Identifier: Apache-2.0
#include "loop/mdp.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include "loop/archive.hpp"

namespace loop {

bool ActionBounds::contains(const Eigen::VectorXd& a) const {
  return a.size() == lo.size() && (a.array() >= lo.array()).all() && (a.array() <= hi.array()).all();
}

ActionBounds ActionBounds::symmetric(int dim, double limit) {
  return {Eigen::VectorXd::Constant(dim, -limit), Eigen::VectorXd::Constant(dim, limit)};
}

DiscountSpec::DiscountSpec(double gamma) : gamma_(gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("discount must lie in (0, 1)");
}

double discounted_return(std::span<const double> rewards, double gamma) {
  const DiscountSpec spec(gamma);
  double total = 0.0;
  double weight = 1.0;
  for (double r : rewards) {
    if (!std::isfinite(r)) throw std::invalid_argument("discounted_return: non-finite reward");
    total += weight * r;
    weight *= spec.gamma();
  }
  return total;
}

Batch Batch::from(std::span<const Transition> rows) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(rows.size());
  if (n == 0) return b;
  const auto sd = rows[0].s.size();
  const auto ad = rows[0].a.size();
  b.s.resize(sd, n);
  b.a.resize(ad, n);
  b.s_next.resize(sd, n);
  b.r.resize(n);
  b.c.resize(n);
  b.done.resize(n);
  bool all_next = true;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = rows[static_cast<std::size_t>(i)];
    b.s.col(i) = t.s;
    b.a.col(i) = t.a;
    b.s_next.col(i) = t.s_next;
    b.r(i) = t.r;
    b.c(i) = t.c;
    b.done(i) = t.done ? 1.0 : 0.0;
    all_next = all_next && t.a_next.has_value();
  }
  if (all_next) {
    b.a_next = Eigen::MatrixXd(ad, n);
    for (Eigen::Index i = 0; i < n; ++i) b.a_next->col(i) = *rows[static_cast<std::size_t>(i)].a_next;
  }
  return b;
}

ReplayBuffer::ReplayBuffer(int state_dim, int action_dim, std::size_t capacity)
    : state_dim_(state_dim), action_dim_(action_dim), capacity_(capacity) {
  if (state_dim <= 0 || action_dim <= 0) throw std::invalid_argument("ReplayBuffer: dims must be positive");
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (t.s.size() != state_dim_ || t.s_next.size() != state_dim_ || t.a.size() != action_dim_ ||
      (t.a_next && t.a_next->size() != action_dim_))
    throw std::invalid_argument("ReplayBuffer::push: dimension mismatch");
  if (!std::isfinite(t.r) || !std::isfinite(t.c) || t.c < 0.0)
    throw std::invalid_argument("ReplayBuffer::push: reward must be finite and cost finite and >= 0");
  if (!t.s.allFinite() || !t.s_next.allFinite() || !t.a.allFinite())
    throw std::invalid_argument("ReplayBuffer::push: non-finite state or action");
  if (data_.size() < capacity_) {
    data_.push_back(std::move(t));
  } else {
    data_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
  }
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= data_.size()) throw std::out_of_range("ReplayBuffer::at");
  return data_[(head_ + i) % data_.size()];
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t n, Rng& rng) const {
  if (n > data_.size()) throw std::invalid_argument("ReplayBuffer::sample: n exceeds size");
  const std::size_t size = data_.size();
  std::vector<std::size_t> idx;
  if (n * 4 < size) {
    // Sparse draw: rejection against the indices taken so far.
    idx.reserve(n);
    std::unordered_set<std::size_t> taken;
    while (idx.size() < n) {
      const auto i = static_cast<std::size_t>(rng.index(size));
      if (taken.insert(i).second) idx.push_back(i);
    }
    return idx;
  }
  idx.resize(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(size - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  return idx;
}

std::vector<Transition> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<Transition> out;
  out.reserve(n);
  for (std::size_t i : sample_indices(n, rng)) out.push_back(at(i));
  return out;
}

std::vector<Transition> ReplayBuffer::snapshot() const {
  std::vector<Transition> out;
  out.reserve(data_.size());
  for (std::size_t i = 0; i < data_.size(); ++i) out.push_back(at(i));
  return out;
}

void ReplayBuffer::save(const std::filesystem::path& path, const nlohmann::json& provenance) const {
  const auto n = static_cast<std::int64_t>(size());
  std::vector<double> s, a, r, c, s_next, a_next;
  std::vector<std::uint8_t> done, has_next;
  for (std::size_t i = 0; i < size(); ++i) {
    const Transition& t = at(i);
    s.insert(s.end(), t.s.data(), t.s.data() + t.s.size());
    a.insert(a.end(), t.a.data(), t.a.data() + t.a.size());
    s_next.insert(s_next.end(), t.s_next.data(), t.s_next.data() + t.s_next.size());
    r.push_back(t.r);
    c.push_back(t.c);
    done.push_back(t.done ? 1 : 0);
    has_next.push_back(t.a_next ? 1 : 0);
    if (t.a_next)
      a_next.insert(a_next.end(), t.a_next->data(), t.a_next->data() + t.a_next->size());
    else
      a_next.insert(a_next.end(), static_cast<std::size_t>(action_dim_), 0.0);
  }
  ArchiveWriter w;
  w.meta() = {{"format", "loop-replay"}, {"version", 1},       {"state_dim", state_dim_},
              {"action_dim", action_dim_}, {"count", n},        {"capacity", capacity_},
              {"provenance", provenance.is_null() ? nlohmann::json::object() : provenance}};
  w.add("s", std::move(s), {n, state_dim_});
  w.add("a", std::move(a), {n, action_dim_});
  w.add("r", std::move(r), {n});
  w.add("c", std::move(c), {n});
  w.add("s_next", std::move(s_next), {n, state_dim_});
  w.add_bytes("done", std::move(done));
  w.add_bytes("has_a_next", std::move(has_next));
  w.add("a_next", std::move(a_next), {n, action_dim_});
  w.write(path);
}

ReplayBuffer ReplayBuffer::load(const std::filesystem::path& path) {
  const ArchiveReader in(path);
  const auto& meta = in.meta();
  if (meta.value("format", "") != "loop-replay") throw std::runtime_error("not a replay buffer file: " + path.string());
  const int sd = meta.at("state_dim").get<int>();
  const int ad = meta.at("action_dim").get<int>();
  const auto n = meta.at("count").get<std::size_t>();
  const auto cap = std::max<std::size_t>(meta.at("capacity").get<std::size_t>(), n);
  ReplayBuffer buf(sd, ad, std::max<std::size_t>(cap, 1));

  const auto s = in.f64("s"), a = in.f64("a"), r = in.f64("r"), c = in.f64("c");
  const auto s_next = in.f64("s_next"), a_next = in.f64("a_next");
  const auto done = in.u8("done"), has_next = in.u8("has_a_next");
  if (s.size() != n * sd || a.size() != n * ad || r.size() != n || c.size() != n ||
      s_next.size() != n * sd || done.size() != n || has_next.size() != n || a_next.size() != n * ad)
    throw std::runtime_error("replay buffer file has inconsistent column sizes: " + path.string());
  for (std::size_t i = 0; i < n; ++i) {
    Transition t;
    t.s = Eigen::Map<const Eigen::VectorXd>(s.data() + i * sd, sd);
    t.a = Eigen::Map<const Eigen::VectorXd>(a.data() + i * ad, ad);
    t.s_next = Eigen::Map<const Eigen::VectorXd>(s_next.data() + i * sd, sd);
    t.r = r[i];
    t.c = c[i];
    t.done = done[i] != 0;
    if (has_next[i]) t.a_next = Eigen::Map<const Eigen::VectorXd>(a_next.data() + i * ad, ad);
    buf.push(std::move(t));
  }
  return buf;
}

}  // namespace loop
