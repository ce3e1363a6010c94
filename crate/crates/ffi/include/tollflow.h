#ifndef TOLLFLOW_H
#define TOLLFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TollflowStatus {
  TOLLFLOW_STATUS_OK = 0,
  TOLLFLOW_STATUS_NULL_POINTER = 1,
  TOLLFLOW_STATUS_INVALID_ARGUMENT = 2,
  TOLLFLOW_STATUS_SHAPE_MISMATCH = 3,
  TOLLFLOW_STATUS_NO_CONVERGENCE = 4,
  TOLLFLOW_STATUS_PANIC = 5,
} TollflowStatus;

// Parallel-link network.
typedef struct TollflowNetwork TollflowNetwork;

// Stochastic load/toll process with its own generator state.
typedef struct TollflowSimulation TollflowSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *tollflow_last_error(void);

// Library version as a static NUL-terminated string.
const char *tollflow_version(void);

// Network whose link `i` (1-based) has latency `i x² + i`.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum TollflowStatus tollflow_network_quadratic(size_t links, struct TollflowNetwork **out);

// Polynomial latencies from a row-major `links × (degree + 1)` table where
// entry `[i][k]` is the coefficient of `x^k` on link `i`.
//
// # Safety
// `coefficients` must point to `links * (degree + 1)` doubles and `out` to a
// handle slot.
enum TollflowStatus tollflow_network_new(size_t links,
                                         size_t degree,
                                         const double *coefficients,
                                         struct TollflowNetwork **out);

// # Safety
// `net` must be null or a handle from a `tollflow_network_*` constructor
// that has not been freed.
void tollflow_network_free(struct TollflowNetwork *net);

// Number of links, or 0 for a null handle.
//
// # Safety
// `net` must be null or a live network handle.
size_t tollflow_network_links(const struct TollflowNetwork *net);

// Latency of link `link` (0-based) at load `x`.
//
// # Safety
// `net` must be a live network handle and `out` a writable double.
enum TollflowStatus tollflow_latency(const struct TollflowNetwork *net,
                                     size_t link,
                                     double x,
                                     double *out);

// Stochastic user equilibrium `x̄(p)` for demand `demand` at toll `toll`.
//
// # Safety
// `toll` and `out_load` must each point to `len` doubles, `len` equal to the
// number of links.
enum TollflowStatus tollflow_solve_sue(const struct TollflowNetwork *net,
                                       double beta,
                                       double demand,
                                       const double *toll,
                                       double *out_load,
                                       size_t len);

// Equilibrium toll `p̄`, its SUE `x̄(p̄)` and the social optimum. Any output
// pointer may be null to skip it.
//
// # Safety
// Non-null outputs must point to `len` writable doubles.
enum TollflowStatus tollflow_solve_equilibrium(const struct TollflowNetwork *net,
                                               double beta,
                                               double demand,
                                               double *out_load,
                                               double *out_toll,
                                               double *out_social,
                                               size_t len);

// Simulation from zero load and toll with uniform arrivals on
// `[λ/2, 3λ/2]` and discharges centred on `μ`. The network is copied.
//
// # Safety
// `net` must be a live network handle and `out` a handle slot.
enum TollflowStatus tollflow_simulation_new(const struct TollflowNetwork *net,
                                            double beta,
                                            double lambda,
                                            double mu,
                                            double toll_step,
                                            uint64_t seed,
                                            struct TollflowSimulation **out);

// # Safety
// `sim` must be null or a live simulation handle.
void tollflow_simulation_free(struct TollflowSimulation *sim);

// Advances the process by `steps` steps.
//
// # Safety
// `sim` must be a live simulation handle not used concurrently.
enum TollflowStatus tollflow_simulation_step(struct TollflowSimulation *sim, size_t steps);

// Copies the current load and toll and the step count. Any output may be null.
//
// # Safety
// Non-null `load`/`toll` must point to `len` writable doubles.
enum TollflowStatus tollflow_simulation_state(const struct TollflowSimulation *sim,
                                              double *load,
                                              double *toll,
                                              size_t len,
                                              uint64_t *step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOLLFLOW_H */
