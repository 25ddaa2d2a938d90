#ifndef ETS_IMPACT_H
#define ETS_IMPACT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EtsStatus {
  ETS_STATUS_OK = 0,
  ETS_STATUS_NULL_ARGUMENT = 1,
  ETS_STATUS_CONFIG = 2,
  ETS_STATUS_DATA = 3,
  ETS_STATUS_ESTIMATION = 4,
  ETS_STATUS_IO = 5,
  ETS_STATUS_PANIC = 6,
} EtsStatus;

// Opaque fitted frontier for one industry.
typedef struct EtsFrontier EtsFrontier;

// Opaque firm-year panel.
typedef struct EtsPanel EtsPanel;

typedef struct EtsPanelCounts {
  size_t n_firms;
  size_t n_treated;
  size_t n_obs;
} EtsPanelCounts;

// One treatment-effect cell. `estimate` and `se` are in log points.
typedef struct EtsAtt {
  double estimate;
  double se;
  double p_value;
  size_t n_treated;
  size_t n_controls;
} EtsAtt;

typedef struct EtsFrontierParams {
  uint16_t industry;
  double constant;
  double beta_k;
  double beta_l;
  double beta_e;
  // Noise standard deviation.
  double sigma_u;
  double mu_v;
  // Inefficiency scale.
  double sigma_v;
  double log_likelihood;
  size_t n_obs;
  bool converged;
  bool boundary;
} EtsFrontierParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ets_version(void);

// Message of the last failed call on this thread, or NULL after a
// success. Valid until the next call into the library on this thread.
const char *ets_last_error_message(void);

// Reads a long-format panel CSV.
//
// # Safety
// `path` must be a NUL-terminated string and `out_panel` a valid pointer.
enum EtsStatus ets_panel_read_csv(const char *path, struct EtsPanel **out_panel);

// Reads a panel from CSV bytes held in memory.
//
// # Safety
// `data` must point to `len` readable bytes and `out_panel` be a valid pointer.
enum EtsStatus ets_panel_from_bytes(const uint8_t *data, size_t len, struct EtsPanel **out_panel);

// Draws a synthetic panel from a named preset. `n_firms` 0 keeps the
// preset's size.
//
// # Safety
// `preset_name` must be a NUL-terminated string and `out_panel` a valid pointer.
enum EtsStatus ets_panel_simulate(const char *preset_name,
                                  uint64_t seed,
                                  size_t n_firms,
                                  struct EtsPanel **out_panel);

// # Safety
// `panel` must be a live handle and `counts` a valid pointer.
enum EtsStatus ets_panel_counts(const struct EtsPanel *panel, struct EtsPanelCounts *counts);

// # Safety
// `panel` must be a live handle and `path` a NUL-terminated string.
enum EtsStatus ets_panel_write_csv(const struct EtsPanel *panel, const char *path);

// # Safety
// `panel` must be NULL or a handle not yet freed.
void ets_panel_free(struct EtsPanel *panel);

// Runs the whole pipeline and writes the report bundle to `out_dir`.
// `config_toml` may be NULL for defaults.
//
// # Safety
// Both arguments must be NULL-or-NUL-terminated strings; `out_dir` is
// required.
enum EtsStatus ets_run_pipeline(const char *config_toml, const char *out_dir);

// One ATT cell on `panel`. `estimator` is e.g. "NN(1:5)" or "OLS-w/R";
// `window` is "Pretreatment", "PhaseI" or "PhaseII". Other settings come
// from `config_toml` (NULL for defaults).
//
// # Safety
// `panel` must be a live handle, strings NUL-terminated and `result` a
// valid pointer.
enum EtsStatus ets_att(const struct EtsPanel *panel,
                       const char *outcome,
                       const char *window,
                       const char *estimator,
                       const char *config_toml,
                       struct EtsAtt *result);

// Fits the frontier of one industry over `first_year..=last_year` with
// default options.
//
// # Safety
// `panel` must be a live handle and `out_frontier` a valid pointer.
enum EtsStatus ets_frontier_fit(const struct EtsPanel *panel,
                                uint16_t industry,
                                int32_t first_year,
                                int32_t last_year,
                                struct EtsFrontier **out_frontier);

// # Safety
// `frontier` must be a live handle and `params` a valid pointer.
enum EtsStatus ets_frontier_params(const struct EtsFrontier *frontier,
                                   struct EtsFrontierParams *params);

// Sum of the input elasticities; NaN for a NULL handle.
//
// # Safety
// `frontier` must be NULL or a live handle.
double ets_frontier_returns_to_scale(const struct EtsFrontier *frontier);

// # Safety
// `frontier` must be NULL or a handle not yet freed.
void ets_frontier_free(struct EtsFrontier *frontier);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ETS_IMPACT_H */
