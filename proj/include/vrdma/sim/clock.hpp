#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vrdma/sim/task.hpp"

namespace vrdma::sim {

// Simulated time in integer nanoseconds.
using Ns = std::int64_t;

struct EventHandle {
  Ns when = -1;
  std::uint64_t seq = 0;
  bool valid() const { return when >= 0; }
};

// Thrown when a run exceeds its event budget (runaway scenario detection).
struct BudgetExceeded : std::runtime_error {
  explicit BudgetExceeded(std::uint64_t budget)
      : std::runtime_error("event budget exceeded: " + std::to_string(budget)) {}
};

// Deterministic discrete-event clock. Events at equal timestamps fire in
// insertion order; every state mutation happens inside an event, so a given
// (seed, config) pair always replays the identical trace.
class SimClock {
 public:
  EventHandle schedule(Ns delay, std::function<void()> fn) {
    if (delay < 0) throw std::invalid_argument("negative event delay");
    EventHandle h{now_ + delay, next_seq_++};
    pending_.emplace(std::make_pair(h.when, h.seq), std::move(fn));
    return h;
  }

  bool cancel(const EventHandle& h) {
    return pending_.erase(std::make_pair(h.when, h.seq)) > 0;
  }

  // Runs until no events remain. Returns the final simulated time.
  Ns run_until_idle() {
    while (!pending_.empty()) step();
    return now_;
  }

  // Runs until the predicate holds, or until idle. The predicate is checked
  // before the first event and after every event, including the last one.
  Ns run_until(const std::function<bool()>& pred) {
    while (!pred() && !pending_.empty()) step();
    return now_;
  }

  Ns now() const { return now_; }
  std::uint64_t events_processed() const { return events_processed_; }
  bool idle() const { return pending_.empty(); }

  void set_event_budget(std::uint64_t budget) { budget_ = budget; }

  // Probe invoked as each event fires; used by trace-determinism tests.
  void set_observer(std::function<void(Ns, std::uint64_t)> obs) { observer_ = std::move(obs); }

  // Suspends the awaiting task for `delay` nanoseconds.
  auto delay(Ns d) {
    struct Awaiter {
      SimClock* clk;
      Ns d;
      bool await_ready() const noexcept { return false; }
      void await_suspend(std::coroutine_handle<> h) {
        clk->schedule(d, [h] { h.resume(); });
      }
      void await_resume() const noexcept {}
    };
    return Awaiter{this, d};
  }

 private:
  void step() {
    auto it = pending_.begin();
    if (++events_processed_ > budget_) throw BudgetExceeded(budget_);
    now_ = it->first.first;
    auto fn = std::move(it->second);
    pending_.erase(it);
    if (observer_) observer_(now_, events_processed_);
    fn();
  }

  Ns now_ = 0;
  std::uint64_t next_seq_ = 0;
  std::uint64_t events_processed_ = 0;
  std::uint64_t budget_ = 200'000'000;
  std::map<std::pair<Ns, std::uint64_t>, std::function<void()>> pending_;
  std::function<void(Ns, std::uint64_t)> observer_;
};

// FIFO wakeup list. notify_one/notify_all schedule resumptions as ordinary
// events at the current time, so waiters interleave deterministically with
// everything else. Waiters must re-check their condition after resuming.
class WaitList {
 public:
  explicit WaitList(SimClock& clk) : clk_(&clk) {}

  auto wait() {
    struct Awaiter {
      WaitList* wl;
      bool await_ready() const noexcept { return false; }
      void await_suspend(std::coroutine_handle<> h) { wl->waiters_.push_back(h); }
      void await_resume() const noexcept {}
    };
    return Awaiter{this};
  }

  void notify_all() {
    for (auto h : waiters_) clk_->schedule(0, [h] { h.resume(); });
    waiters_.clear();
  }

  bool empty() const { return waiters_.empty(); }

 private:
  SimClock* clk_;
  std::vector<std::coroutine_handle<>> waiters_;
};

// Serial FIFO resource (one unit of hardware that processes jobs in arrival
// order). acquire() returns the job's completion time and advances the
// resource; callers schedule their continuation at that time.
class SerialResource {
 public:
  Ns acquire(Ns now, Ns duration) {
    Ns start = free_at_ > now ? free_at_ : now;
    free_at_ = start + duration;
    busy_total_ += duration;
    return free_at_;
  }
  Ns free_at() const { return free_at_; }
  Ns busy_total() const { return busy_total_; }

 private:
  Ns free_at_ = 0;
  Ns busy_total_ = 0;
};

// Deterministic, compiler-independent PRNG for scenario randomness
// (splitmix64). std:: distributions are implementation-defined, which would
// break byte-identical CSV replay across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next() % n : 0; }

  // Uniform in [lo, hi] inclusive.
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool chance(double p) { return static_cast<double>(next() >> 11) * 0x1.0p-53 < p; }

 private:
  std::uint64_t state_;
};

}  // namespace vrdma::sim
