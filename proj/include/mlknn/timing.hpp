#pragma once

#include <utility>

namespace mlknn {

enum class CpuClock {
    process,  // CPU time summed over every thread of the process
    thread,   // CPU time of the calling thread only
};

/// Current CPU time in seconds; nanosecond-resolution POSIX clocks.
double cpu_seconds(CpuClock clock = CpuClock::process);

/// Reported resolution of the clock in seconds.
double cpu_clock_resolution(CpuClock clock = CpuClock::process);

/// CPU (not wall-clock) seconds spent running `thunk`.
template <class Thunk>
double capture_timing(Thunk&& thunk, CpuClock clock = CpuClock::process) {
    const double start = cpu_seconds(clock);
    std::forward<Thunk>(thunk)();
    const double elapsed = cpu_seconds(clock) - start;
    return elapsed > 0.0 ? elapsed : 0.0;
}

}  // namespace mlknn
