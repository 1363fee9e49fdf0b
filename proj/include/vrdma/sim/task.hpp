#pragma once

#include <coroutine>
#include <cstdint>
#include <exception>
#include <memory>
#include <utility>

namespace vrdma::sim {

// Cooperative task running on the simulation clock. Tasks start eagerly and
// only suspend at explicit awaits (delays, wait lists, sub-tasks), so all
// state mutation between suspension points is atomic with respect to other
// simulated actors. A task must be kept alive until it has finished running;
// destroying an unfinished task aborts its frame.
template <typename T>
class Task;

namespace detail {

struct TaskStateBase {
  bool done = false;
  std::coroutine_handle<> continuation{};
};

template <typename T>
struct TaskState : TaskStateBase {
  T value{};
};

template <>
struct TaskState<void> : TaskStateBase {};

template <typename T>
struct TaskPromise;

struct FinalAwaiter {
  bool await_ready() noexcept { return false; }
  template <typename P>
  std::coroutine_handle<> await_suspend(std::coroutine_handle<P> h) noexcept {
    auto& st = *h.promise().state;
    st.done = true;
    if (st.continuation) return std::exchange(st.continuation, nullptr);
    return std::noop_coroutine();
  }
  void await_resume() noexcept {}
};

template <typename T>
struct TaskPromiseBase {
  std::shared_ptr<TaskState<T>> state = std::make_shared<TaskState<T>>();

  std::suspend_never initial_suspend() noexcept { return {}; }
  FinalAwaiter final_suspend() noexcept { return {}; }
  void unhandled_exception() { std::terminate(); }
};

template <typename T>
struct TaskPromise : TaskPromiseBase<T> {
  Task<T> get_return_object();
  void return_value(T v) { this->state->value = std::move(v); }
};

template <>
struct TaskPromise<void> : TaskPromiseBase<void> {
  Task<void> get_return_object();
  void return_void() {}
};

}  // namespace detail

template <typename T = void>
class [[nodiscard]] Task {
 public:
  using promise_type = detail::TaskPromise<T>;

  Task() = default;
  Task(std::coroutine_handle<promise_type> h, std::shared_ptr<detail::TaskState<T>> st)
      : handle_(h), state_(std::move(st)) {}
  Task(Task&& o) noexcept
      : handle_(std::exchange(o.handle_, nullptr)), state_(std::move(o.state_)) {}
  Task& operator=(Task&& o) noexcept {
    if (this != &o) {
      reset();
      handle_ = std::exchange(o.handle_, nullptr);
      state_ = std::move(o.state_);
    }
    return *this;
  }
  Task(const Task&) = delete;
  Task& operator=(const Task&) = delete;
  ~Task() { reset(); }

  bool valid() const { return state_ != nullptr; }
  bool done() const { return state_ && state_->done; }

  // Result of a finished task; only meaningful once done().
  template <typename U = T>
    requires(!std::is_void_v<U>)
  const U& result() const {
    return state_->value;
  }

  // Awaiting a task resumes the awaiter when the task finishes. At most one
  // awaiter per task.
  auto operator co_await() const& {
    struct Awaiter {
      detail::TaskState<T>* st;
      bool await_ready() const noexcept { return st->done; }
      void await_suspend(std::coroutine_handle<> h) noexcept { st->continuation = h; }
      T await_resume() const noexcept {
        if constexpr (!std::is_void_v<T>) return std::move(st->value);
      }
    };
    return Awaiter{state_.get()};
  }

 private:
  void reset() {
    if (handle_) {
      handle_.destroy();
      handle_ = nullptr;
    }
    state_.reset();
  }

  std::coroutine_handle<promise_type> handle_{};
  std::shared_ptr<detail::TaskState<T>> state_{};
};

namespace detail {

template <typename T>
Task<T> TaskPromise<T>::get_return_object() {
  return Task<T>(std::coroutine_handle<TaskPromise<T>>::from_promise(*this), this->state);
}

inline Task<void> TaskPromise<void>::get_return_object() {
  return Task<void>(std::coroutine_handle<TaskPromise<void>>::from_promise(*this), this->state);
}

}  // namespace detail

}  // namespace vrdma::sim
