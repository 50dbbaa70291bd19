#ifndef DILEMMA_H
#define DILEMMA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DlStatus {
  DL_OK = 0,
  DL_NULL_POINTER = 1,
  DL_INVALID_ARGUMENT = 2,
  DL_PARSE_ERROR = 3,
  DL_ROOM_FULL = 4,
  DL_WRONG_PHASE = 5,
  DL_NOT_MEMBER = 6,
  DL_RANK_TOO_LOW = 7,
  DL_PANIC = 99,
} DlStatus;

/**
 * A parsed dilemma catalog.
 */
typedef struct DlCatalog DlCatalog;

/**
 * A room in its lobby, using the built-in game content.
 */
typedef struct DlRoom DlRoom;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dl_last_error_message(void);

/**
 * Parses catalog CSV text (NUL-terminated UTF-8) into `*out`.
 *
 * # Safety
 * `csv` must be a valid C string and `out` a valid pointer.
 */
enum DlStatus dl_catalog_parse(const char *csv, struct DlCatalog **out);

/**
 * # Safety
 * `catalog` must come from [`dl_catalog_parse`] and not be freed twice.
 */
void dl_catalog_free(struct DlCatalog *catalog);

/**
 * Number of dilemmas in `group` (0 for A, 1 for B).
 *
 * # Safety
 * `catalog` and `out` must be valid pointers.
 */
enum DlStatus dl_catalog_group_count(const struct DlCatalog *catalog, uint8_t group, size_t *out);

/**
 * Tallies `len` votes (0 like, 1 dislike, 2 other) into
 * `out[0..3]` = (positive, negative, other).
 *
 * # Safety
 * `choices` must point to `len` bytes (or be NULL when `len` is 0) and
 * `out` to 3 writable `uint32_t`.
 */
enum DlStatus dl_tally(const uint8_t *choices, size_t len, uint32_t *out);

/**
 * Export file stem for `table` (1 or 2) at `now_ms`; `n < 0` omits the
 * part number. Release `*out` with [`dl_string_free`].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DlStatus dl_export_stem(uint8_t table, int64_t n, uint64_t now_ms, char **out);

/**
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void dl_string_free(char *s);

/**
 * Creates a room hosted by `host` using the built-in content.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DlStatus dl_room_new(uint32_t host, uint64_t seed, struct DlRoom **out);

/**
 * # Safety
 * `room` must be a valid room pointer.
 */
enum DlStatus dl_room_join(struct DlRoom *room, uint32_t player);

/**
 * # Safety
 * `room` must be a valid room pointer.
 */
enum DlStatus dl_room_leave(struct DlRoom *room, uint32_t player);

/**
 * # Safety
 * `room` and `out` must be valid pointers.
 */
enum DlStatus dl_room_member_count(const struct DlRoom *room, size_t *out);

/**
 * # Safety
 * `room` must come from [`dl_room_new`] and not be freed twice.
 */
void dl_room_free(struct DlRoom *room);

/**
 * Explained variance ratios of the first `k` principal components of the
 * row-major `n × d` matrix `data`, written to `out[0..k]`.
 *
 * # Safety
 * `data` must point to `n * d` doubles and `out` to `k` writable doubles.
 */
enum DlStatus dl_pca_explained_variance(const double *data,
                                        size_t n,
                                        size_t d,
                                        size_t k,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DILEMMA_H */
