#ifndef MMGRAPH_H
#define MMGRAPH_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmgStatus {
  MMG_STATUS_OK = 0,
  MMG_STATUS_NULL_POINTER = 1,
  MMG_STATUS_VALIDATION = 2,
  MMG_STATUS_NUMERIC = 3,
  MMG_STATUS_DIMENSION = 4,
  MMG_STATUS_LOOKUP = 5,
  MMG_STATUS_CONTRACT = 6,
  MMG_STATUS_IO = 7,
  MMG_STATUS_BUFFER_TOO_SMALL = 8,
  MMG_STATUS_PANIC = 9,
} MmgStatus;

typedef enum MmgModality {
  MMG_MODALITY_TEXT = 0,
  MMG_MODALITY_IMAGE = 1,
} MmgModality;

/**
 * Opaque graph handle.
 */
typedef struct MmgGraph MmgGraph;

/**
 * Opaque subgraph handle.
 */
typedef struct MmgSubgraph MmgSubgraph;

/**
 * Mirrors the library's subgraph policy.
 */
typedef struct MmgSubgraphPolicy {
  size_t tau;
  size_t max_nodes;
  bool keep_all_first_hop;
  size_t second_hop_sample_count;
  uint64_t rng_seed;
} MmgSubgraphPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity`. Returns the full message length in bytes.
 *
 * # Safety
 * `buffer` must be null or point to `capacity` writable bytes.
 */
size_t mmg_last_error_message(char *buffer, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmg_version(void);

/**
 * Parses a graph from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MmgStatus mmg_graph_from_json(const char *json, struct MmgGraph **out);

/**
 * Loads a graph file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MmgStatus mmg_graph_load(const char *path, struct MmgGraph **out);

/**
 * # Safety
 * `graph` must come from this library and not be used afterwards.
 */
void mmg_graph_free(struct MmgGraph *graph);

/**
 * # Safety
 * `graph` must be a live handle and `out` writable.
 */
enum MmgStatus mmg_graph_node_count(const struct MmgGraph *graph, size_t *out);

/**
 * The library's default policy (`tau` 2, at most 11 nodes).
 */
struct MmgSubgraphPolicy mmg_subgraph_policy_default(void);

/**
 * Extracts the subgraph of `modality` around `target`.
 *
 * # Safety
 * `graph` must be a live handle and `out` writable.
 */
enum MmgStatus mmg_subgraph_induce(const struct MmgGraph *graph,
                                   uint64_t target,
                                   enum MmgModality modality,
                                   struct MmgSubgraphPolicy policy,
                                   struct MmgSubgraph **out);

/**
 * # Safety
 * `subgraph` must come from this library and not be used afterwards.
 */
void mmg_subgraph_free(struct MmgSubgraph *subgraph);

/**
 * Number of nodes in the subgraph, or 0 for a null handle.
 *
 * # Safety
 * `subgraph` must be null or a live handle.
 */
size_t mmg_subgraph_len(const struct MmgSubgraph *subgraph);

/**
 * Copies node ids and hop labels, in subgraph order.
 *
 * # Safety
 * `ids` and `hops` must each hold `capacity` elements.
 */
enum MmgStatus mmg_subgraph_nodes(const struct MmgSubgraph *subgraph,
                                  uint64_t *ids,
                                  size_t *hops,
                                  size_t capacity);

/**
 * Copies the `n x n` induced adjacency, row-major.
 *
 * # Safety
 * `out` must hold `capacity` doubles.
 */
enum MmgStatus mmg_subgraph_adjacency(const struct MmgSubgraph *subgraph,
                                      double *out,
                                      size_t capacity);

/**
 * Row softmax of `rows x cols` logits; `mask` (same shape, 0/1) may be null.
 *
 * # Safety
 * Buffers must hold `rows * cols` doubles.
 */
enum MmgStatus mmg_row_softmax(const double *logits,
                               const double *mask,
                               size_t rows,
                               size_t cols,
                               double *out);

/**
 * Truncated diffusion `Σ_{i=0}^{K} θ_i A^i` of a row-stochastic `n x n` matrix.
 *
 * # Safety
 * `a` and `out` must hold `n * n` doubles.
 */
enum MmgStatus mmg_diffuse(const double *a,
                           size_t n,
                           double alpha,
                           size_t steps,
                           bool renormalize,
                           double *out);

/**
 * Closed form `α (I - (1-α) A)^{-1}`.
 *
 * # Safety
 * `a` and `out` must hold `n * n` doubles.
 */
enum MmgStatus mmg_ppr(const double *a, size_t n, double alpha, double *out);

/**
 * Dirichlet energy of `n x d` features over an `n x n` adjacency.
 *
 * # Safety
 * `x` holds `n * d` doubles, `adjacency` `n * n`; `out` is writable.
 */
enum MmgStatus mmg_dirichlet_energy(const double *x,
                                    size_t n,
                                    size_t d,
                                    const double *adjacency,
                                    double *out);

/**
 * Picks the class whose description best matches `response`.
 *
 * # Safety
 * `ids` and `descriptions` hold `count` entries; strings are NUL-terminated.
 */
enum MmgStatus mmg_classify(const char *response,
                            const uint32_t *ids,
                            const char *const *descriptions,
                            size_t count,
                            uint32_t *out_class);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMGRAPH_H */
