#include "mlknn/timing.hpp"

#include <ctime>

namespace mlknn {

namespace {

clockid_t clock_id(CpuClock clock) {
    return clock == CpuClock::thread ? CLOCK_THREAD_CPUTIME_ID : CLOCK_PROCESS_CPUTIME_ID;
}

}  // namespace

double cpu_seconds(CpuClock clock) {
    timespec ts{};
    clock_gettime(clock_id(clock), &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

double cpu_clock_resolution(CpuClock clock) {
    timespec ts{};
    clock_getres(clock_id(clock), &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

}  // namespace mlknn
