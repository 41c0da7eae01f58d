// Compares the OpenMP scan kernel against the serial reference on seeded
// buffers and prints throughput for both. Exits nonzero if they ever
// disagree, so the benchmark doubles as a long-input equivalence check.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <vector>

#include "erimforge/bytescan.hpp"

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::uint8_t> seeded_buffer(std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> buf(size);
  for (auto& b : buf) b = static_cast<std::uint8_t>(rng());
  // plant intact patterns so the match path is exercised
  for (std::size_t i = 0; i + 3 <= size; i += 4096 + 37) {
    buf[i] = 0x0F;
    buf[i + 1] = 0x01;
    buf[i + 2] = 0xEF;
  }
  return buf;
}

template <typename F>
double seconds(F&& f, int reps) {
  const auto t0 = Clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = Clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  constexpr std::size_t kSize = 64u << 20;
  constexpr int kReps = 5;
  const auto buf = seeded_buffer(kSize, 42);

  std::vector<erim::Occurrence> serial, parallel;
  const double ts = seconds([&] { serial = erim::scan_serial(buf); }, kReps);
  const double tp = seconds([&] { parallel = erim::scan(buf); }, kReps);

  const double mb = static_cast<double>(kSize) / (1 << 20);
  std::printf("buffer        %zu bytes, %zu occurrences\n", kSize,
              serial.size());
  std::printf("scan_serial   %8.2f MiB/s  (%.3fs)\n", mb / ts, ts);
  std::printf("scan          %8.2f MiB/s  (%.3fs)  speedup %.2fx\n", mb / tp,
              tp, ts / tp);

  if (serial != parallel) {
    std::fprintf(stderr, "kernel outputs disagree\n");
    return 1;
  }
  return 0;
}
