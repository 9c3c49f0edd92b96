#ifndef FAIRTUNE_H
#define FAIRTUNE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a fallible call. Matches the CLI's exit-code convention.
 */
typedef enum FtStatus {
  Ok = 0,
  /**
   * A caller-supplied argument violated the contract (null pointer,
   * non-UTF-8 string, unknown method name, out-of-range value).
   */
  InvalidInput = 1,
  /**
   * Missing or malformed files and mismatched artifacts.
   */
  Data = 2,
  /**
   * Non-finite values or a diverged computation.
   */
  Numerical = 3,
  /**
   * An internal invariant broke; the library state is still sound but the
   * call produced nothing.
   */
  Panic = 4,
} FtStatus;

/**
 * Aligned word tuples marking membership in demographic groups.
 */
typedef struct FtLexicon FtLexicon;

/**
 * A loaded model: frozen core, optional tuning overlay, and the tokenizer
 * the pair was trained with.
 */
typedef struct FtSession FtSession;

/**
 * Library version as a static NUL-terminated string. Never null; do not
 * free.
 */
const char *ft_version(void);

/**
 * Message from the most recent failing call on this thread, empty if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *ft_last_error(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have come from a fairtune function documented to transfer
 * ownership, and must not be used afterwards.
 */
void ft_string_free(char *s);

/**
 * Opens a bundled lexicon: "gender", "religion", or "race". Null on unknown
 * names.
 *
 * # Safety
 * `name` must be a NUL-terminated string or null.
 */
struct FtLexicon *ft_lexicon_builtin(const char *name);

/**
 * Loads a lexicon from a tab-separated tuple file with `expected_groups`
 * columns. Null on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string or null.
 */
struct FtLexicon *ft_lexicon_open(const char *path, uintptr_t expected_groups);

/**
 * Number of demographic groups (columns). Zero if `lexicon` is null.
 *
 * # Safety
 * `lexicon` must be a live handle from this library or null.
 */
uintptr_t ft_lexicon_num_groups(const struct FtLexicon *lexicon);

/**
 * Number of word tuples (rows). Zero if `lexicon` is null.
 *
 * # Safety
 * `lexicon` must be a live handle from this library or null.
 */
uintptr_t ft_lexicon_tuples(const struct FtLexicon *lexicon);

/**
 * Releases a lexicon handle. Null is a no-op.
 *
 * # Safety
 * `lexicon` must have come from `ft_lexicon_builtin`/`ft_lexicon_open` and
 * must not be used afterwards.
 */
void ft_lexicon_free(struct FtLexicon *lexicon);

/**
 * Counterfactually augments a one-sentence-per-line corpus and writes the
 * result as JSON lines. Every kept sentence contributes its original
 * followed by `samples` rewrites. `out_examples` (optional) receives the
 * number of examples written.
 *
 * # Safety
 * `lexicon` must be a live handle; `input` and `output` NUL-terminated
 * strings; `out_examples` a writable pointer or null.
 */
enum FtStatus ft_augment_file(const struct FtLexicon *lexicon,
                              const char *input,
                              const char *output,
                              uintptr_t samples,
                              bool keep_neutral,
                              bool exclude_fixed_identity,
                              uint64_t seed,
                              uintptr_t *out_examples);

/**
 * Tunable-parameter count for an overlay method on a transformer of the
 * given shape. `method` is "full", "prefix", "prompt", or "adapter";
 * `l` is the prefix/prompt length and `r` the adapter reduction factor
 * (each ignored by the other methods).
 *
 * # Safety
 * `method` must be a NUL-terminated string; `out_count` writable.
 */
enum FtStatus ft_count_tunable(const char *method,
                               uintptr_t l,
                               uintptr_t r,
                               uintptr_t d,
                               uintptr_t layers,
                               uintptr_t heads,
                               uintptr_t t_max,
                               uintptr_t vocab,
                               uintptr_t *out_count);

/**
 * Combined bias/quality score from a stereotype score and a language-model
 * score, both in [0, 100].
 *
 * # Safety
 * `out_icat` must be writable.
 */
enum FtStatus ft_icat(double ss, double lms, double *out_icat);

/**
 * Paired sign-flip significance test between two runs' per-example
 * indicators (same length, same example order). Exact enumeration up to 16
 * pairs, seeded resampling above that. `resamples` is ignored in the exact
 * regime.
 *
 * # Safety
 * `baseline` and `current` must point to `len` readable doubles; `out_p`
 * must be writable.
 */
enum FtStatus ft_permutation_test(const double *baseline,
                                  const double *current,
                                  uintptr_t len,
                                  uintptr_t resamples,
                                  uint64_t seed,
                                  double *out_p);

/**
 * Opens a scoring session from checkpoint files. `overlay_path` may be null
 * to score the bare core. The overlay must have been trained against this
 * exact core; a fingerprint mismatch fails. Null on failure.
 *
 * # Safety
 * Paths must be NUL-terminated strings (`overlay_path` may be null).
 */
struct FtSession *ft_session_open(const char *core_path,
                                  const char *overlay_path,
                                  const char *tokenizer_path);

/**
 * Hex digest identifying the session's core parameters. Caller owns the
 * string; release with [`ft_string_free`]. Null on failure.
 *
 * # Safety
 * `session` must be a live handle or null.
 */
char *ft_session_fingerprint(const struct FtSession *session);

/**
 * Length-normalized log-probability of one sentence under the session
 * model (higher is more plausible).
 *
 * # Safety
 * `session` must be a live handle; `sentence` a NUL-terminated string;
 * `out_logprob` writable.
 */
enum FtStatus ft_session_score(const struct FtSession *session,
                               const char *sentence,
                               double *out_logprob);

/**
 * Corpus perplexity of a one-sentence-per-line file under the session
 * model.
 *
 * # Safety
 * `session` must be a live handle; `corpus_path` a NUL-terminated string;
 * `out_perplexity` writable.
 */
enum FtStatus ft_session_perplexity_file(const struct FtSession *session,
                                         const char *corpus_path,
                                         double *out_perplexity);

/**
 * Stereotype score over a JSONL file of sentence pairs: the percentage of
 * pairs where the model prefers the more-stereotypical sentence (50 is
 * unbiased).
 *
 * # Safety
 * `session` must be a live handle; `pairs_path` a NUL-terminated string;
 * `out_score` writable.
 */
enum FtStatus ft_session_stereotype_score(const struct FtSession *session,
                                          const char *pairs_path,
                                          double *out_score);

/**
 * Releases a session handle. Null is a no-op.
 *
 * # Safety
 * `session` must have come from `ft_session_open` and must not be used
 * afterwards.
 */
void ft_session_free(struct FtSession *session);

#endif  /* FAIRTUNE_H */
