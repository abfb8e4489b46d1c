#ifndef BEVDISTILL_H
#define BEVDISTILL_H

/* C interface to the BEV distillation core. All functions return a status
 * code; every non-status result comes back through an out parameter.
 * Handles are opaque and must be released with the matching *_free call.
 * Strings returned through char** are heap-allocated; release them with
 * bevd_string_free. On failure bevd_last_error() describes the problem for
 * the calling thread. */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define BEVD_OK 0
#define BEVD_ERR_RUNTIME 1 /* I/O, bad artifacts, internal failures */
#define BEVD_ERR_CONFIG 2  /* malformed config or invalid usage */

typedef struct bevd_config bevd_config;
typedef struct bevd_corpus bevd_corpus;
typedef struct bevd_model bevd_model;

const char* bevd_version(void);
/* Message of the last failure on this thread; empty string if none. */
const char* bevd_last_error(void);
void bevd_string_free(char* s);

/* ---- configuration ---- */
int bevd_config_default(bevd_config** out);
int bevd_config_load(const char* path, bevd_config** out);
int bevd_config_parse(const char* text, bevd_config** out);
int bevd_config_set(bevd_config* cfg, const char* key, const char* value);
int bevd_config_save(const bevd_config* cfg, const char* path);
int bevd_config_serialize(const bevd_config* cfg, char** text_out);
int bevd_config_hash(const bevd_config* cfg, uint64_t* out);
void bevd_config_free(bevd_config* cfg);

/* ---- scene corpora ---- */
int bevd_corpus_generate(const bevd_config* cfg, const char* split, int n_scenes,
                         bevd_corpus** out);
int bevd_corpus_write(const bevd_corpus* corpus, const bevd_config* cfg,
                      const char* dir, const char* split);
int bevd_corpus_read(const char* dir, bevd_corpus** out);
int bevd_corpus_size(const bevd_corpus* corpus, int* out);
void bevd_corpus_free(bevd_corpus* corpus);

/* ---- models ---- */
/* role: 1 trains the lidar+camera teacher, 0 the radar+camera student. */
int bevd_train(const bevd_config* cfg, int role_teacher, const bevd_corpus* corpus,
               bevd_model** model_out, char** curve_csv_out);
/* Produces a new distilled model; teacher and student are not modified. */
int bevd_distill(const bevd_config* cfg, const bevd_model* teacher,
                 const bevd_model* student, const bevd_corpus* corpus,
                 bevd_model** model_out, char** curve_csv_out);
int bevd_model_save(const bevd_model* model, const char* dir);
int bevd_model_load(const char* dir, bevd_model** out);
/* Order-stable hash over all parameter payload bytes. */
int bevd_model_params_hash(const bevd_model* model, uint64_t* out);

/* copy of the config the model was built with; caller frees */
int bevd_model_config(const bevd_model* model, bevd_config** out);
/* 1 if the model is a teacher, 0 if a student. */
int bevd_model_role(const bevd_model* model, int* role_teacher_out);
void bevd_model_free(bevd_model* model);

/* ---- evaluation and experiment harnesses ---- */
int bevd_evaluate(const bevd_model* model, const bevd_corpus* corpus,
                  const bevd_config* cfg, char** report_json_out);
int bevd_evaluate_map(const bevd_model* model, const bevd_corpus* corpus,
                      const bevd_config* cfg, double* map_out);
/* CSV: name,config_hash,map,reused. Runs every ablation row. */
int bevd_ablate(const bevd_config* cfg, char** csv_out);
/* BEVD_OK only if every gradient check passes. The report is written even
 * on failure. */
int bevd_gradcheck(int fixtures_per_case, uint64_t seed, char** report_out);

/* ---- utilities ---- */
int bevd_hash_file(const char* path, uint64_t* out);

#ifdef __cplusplus
}
#endif

#endif /* BEVDISTILL_H */
