/* Stable C interface of the shape retrieval engine.
 *
 * Every call returns a defret_status; on failure defret_last_error() holds a
 * message for the calling thread until its next call. Options are passed as
 * JSON run-configuration text (NULL or "" means defaults). Strings returned
 * through char** are owned by the caller and released with
 * defret_string_free. */
#ifndef DEFRET_H
#define DEFRET_H

#include <stddef.h>
#include <stdint.h>

#if defined(DEFRET_BUILDING_LIBRARY)
#define DEFRET_API __attribute__((visibility("default")))
#else
#define DEFRET_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum defret_status {
  DEFRET_OK = 0,
  DEFRET_INVALID_ARGUMENT = 1,
  DEFRET_NOT_FOUND = 2,
  DEFRET_IO = 3,
  DEFRET_FORMAT = 4,
  DEFRET_CONFIG = 5,
  DEFRET_NUMERIC = 6,
  DEFRET_INCOMPATIBLE = 7,
  DEFRET_INTERNAL = 8
} defret_status;

typedef struct defret_store defret_store;
typedef struct defret_table defret_table;
typedef struct defret_model defret_model;

typedef struct defret_hit {
  size_t index;    /* position in the store */
  double distance; /* egocentric distance from the query */
} defret_hit;

DEFRET_API const char* defret_last_error(void);
DEFRET_API const char* defret_status_string(defret_status status);
DEFRET_API void defret_string_free(char* s);

/* Validates a configuration and returns its hash (16 hex digits). */
DEFRET_API defret_status defret_config_hash(const char* config_json, char** hash_out);

/* ---- shape store ---- */

/* Ingests a JSON manifest into a store directory; the report lists
 * written, unchanged and failed shapes. */
DEFRET_API defret_status defret_ingest(const char* manifest_path, const char* store_dir, const char* config_json,
                                       char** report_json);
/* Generates the procedural family described by the config into a store;
 * the last synthetic.queries shapes get split "test". */
DEFRET_API defret_status defret_synth(const char* store_dir, const char* config_json, char** report_json);

DEFRET_API defret_status defret_store_open(const char* store_dir, defret_store** out);
DEFRET_API void defret_store_free(defret_store* store);
DEFRET_API size_t defret_store_size(const defret_store* store);
/* Borrowed; valid while the store is open. NULL when out of range. */
DEFRET_API const char* defret_store_id(const defret_store* store, size_t index);
DEFRET_API const char* defret_store_split(const defret_store* store, size_t index);
DEFRET_API const char* defret_store_hash(const defret_store* store);

/* ---- fitting gaps ---- */

/* Samples pairs over the database shapes and precomputes their fitting
 * gaps into table_path (resumable). max_new_pairs = 0 means no limit. */
DEFRET_API defret_status defret_fitgap_run(const defret_store* store, const char* table_path, const char* config_json,
                                           int resume, size_t max_new_pairs, char** report_json);

DEFRET_API defret_status defret_table_load(const char* path, defret_table** out);
DEFRET_API defret_status defret_table_save(const defret_table* table, const char* path);
DEFRET_API void defret_table_free(defret_table* table);
DEFRET_API size_t defret_table_size(const defret_table* table);
/* e_eval is NaN when absent. NOT_FOUND when the pair is missing. */
DEFRET_API defret_status defret_table_get(const defret_table* table, uint32_t source, uint32_t target, double* e_train,
                                          double* e_eval);

/* ---- training and retrieval ---- */

/* Trains on the database shapes; writes the checkpoint (+ ".json"
 * metadata) and, when history_csv_path is non-NULL, the per-epoch log. */
DEFRET_API defret_status defret_train_run(const defret_store* store, const char* table_path, const char* config_json,
                                          const char* checkpoint_path, const char* history_csv_path);

DEFRET_API defret_status defret_model_load(const char* checkpoint_path, defret_model** out);
DEFRET_API void defret_model_free(defret_model* model);
DEFRET_API int defret_model_dim(const defret_model* model);
/* Store hash recorded when the model was trained. */
DEFRET_API const char* defret_model_store_hash(const defret_model* model);

/* Top-n store shapes for a query mesh file, best first. `exclude_id` may be
 * NULL. `hits` must hold n entries; *count receives the number written. */
DEFRET_API defret_status defret_retrieve(const defret_model* model, const defret_store* store, const char* query_path,
                                         const char* exclude_id, size_t n, const char* config_json, defret_hit* hits,
                                         size_t* count);

/* Deforms a store shape toward a query mesh and writes the deformed OBJ
 * and its energy report. */
DEFRET_API defret_status defret_deform_to_query(const defret_store* store, size_t source_index, const char* query_path,
                                                const char* config_json, const char* out_obj, const char* out_json);
/* Same for two mesh files (both normalized first). */
DEFRET_API defret_status defret_deform_files(const char* source_path, const char* target_path, const char* config_json,
                                             const char* out_obj, const char* out_json);

/* ---- evaluation ---- */

/* Runs the configured protocols for the model and the Ranked-CD baseline
 * over the store's query split and writes <out_prefix>.csv and
 * <out_prefix>.json. Dense gaps are cached in cache_dir (may be NULL). */
DEFRET_API defret_status defret_evaluate_run(const defret_model* model, const defret_store* store,
                                             const char* table_path, const char* config_json, const char* cache_dir,
                                             const char* out_prefix);

#ifdef __cplusplus
}
#endif

#endif /* DEFRET_H */
