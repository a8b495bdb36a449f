#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stepsep/audio.hpp"

namespace stepsep {

class ExternalProcessError : public std::runtime_error {
public:
    enum class Kind { spawn_failed, crashed, malformed_reply, timeout };

    ExternalProcessError(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

const char* to_string(ExternalProcessError::Kind kind) noexcept;

/// A persistent child process talking over stdin/stdout. The child's stderr
/// is drained while we wait and its tail is attached to every error.
class ChildProcess {
public:
    explicit ChildProcess(const std::vector<std::string>& argv);
    ~ChildProcess();
    ChildProcess(const ChildProcess&) = delete;
    ChildProcess& operator=(const ChildProcess&) = delete;

    using Deadline = std::chrono::steady_clock::time_point;

    void write_all(std::span<const unsigned char> bytes, Deadline deadline);
    std::string read_line(Deadline deadline, std::size_t max_length = 1 << 20);
    std::vector<unsigned char> read_exact(std::size_t count, Deadline deadline);

    /// True once the child has exited or a protocol error poisoned the channel.
    bool broken() const noexcept { return broken_; }
    /// Marks the channel unusable, e.g. after a reply the caller rejected.
    void poison() noexcept { broken_ = true; }
    const std::string& command() const noexcept { return command_; }
    std::string diagnostics() const { return stderr_tail_; }

private:
    [[noreturn]] void fail(ExternalProcessError::Kind kind, const std::string& what);
    void pump(Deadline deadline, bool want_stdout);
    void drain_stderr();
    void reap();

    std::string command_;
    int pid_ = -1;
    int stdin_fd_ = -1;
    int stdout_fd_ = -1;
    int stderr_fd_ = -1;
    bool broken_ = false;
    int exit_status_ = -1;
    std::vector<unsigned char> pending_;  // stdout bytes read but not yet consumed
    std::string stderr_tail_;
};

/// Lazily spawned pool of identical children. lease() hands out an idle child
/// or spawns a new one (up to max_children, then blocks). Broken children are
/// discarded when their lease ends.
class ProcessPool {
public:
    ProcessPool(std::vector<std::string> argv, std::size_t max_children);

    class Lease {
    public:
        Lease(ProcessPool* pool, std::unique_ptr<ChildProcess> child)
            : pool_(pool), child_(std::move(child)), exceptions_(std::uncaught_exceptions()) {}
        Lease(Lease&&) noexcept = default;
        Lease& operator=(Lease&&) noexcept = default;
        ~Lease();
        ChildProcess& operator*() { return *child_; }
        ChildProcess* operator->() { return child_.get(); }

    private:
        ProcessPool* pool_;
        std::unique_ptr<ChildProcess> child_;
        int exceptions_;  // a lease released while unwinding may hold a half-read reply
    };

    Lease lease();
    std::size_t max_children() const noexcept { return max_children_; }
    const std::vector<std::string>& argv() const noexcept { return argv_; }

private:
    void give_back(std::unique_ptr<ChildProcess> child);

    std::vector<std::string> argv_;
    std::size_t max_children_;
    std::mutex mutex_;
    std::vector<std::unique_ptr<ChildProcess>> idle_;
    std::size_t live_ = 0;
    std::condition_variable_any available_;
};

/// Splits a command line on whitespace, honouring single and double quotes.
std::vector<std::string> split_command(const std::string& command);

// ---------------------------------------------------------------------------
// Wire framing shared by external models and external metrics: one JSON line,
// then channels * num_samples little-endian float32 values, channel-interleaved.

struct WireHeader {
    unsigned sample_rate = 0;
    std::size_t channels = 0;
    std::size_t num_samples = 0;
};

std::vector<unsigned char> encode_interleaved_f32(const AudioBuffer& buffer);
AudioBuffer decode_interleaved_f32(std::span<const unsigned char> bytes, const WireHeader& header);

}  // namespace stepsep
