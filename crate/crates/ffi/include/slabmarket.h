#ifndef SLABMARKET_H
#define SLABMARKET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SM_MODE_FULL 0

#define SM_MODE_INTEGRITY 1

#define SM_MODE_PLAIN 2

/**
 * Broker state machine driven by explicit timestamps.
 */
typedef struct SmBroker SmBroker;

/**
 * Consumer KV client.
 */
typedef struct SmKvClient SmKvClient;

typedef int32_t SmStatus;

#define SM_OK 0

#define SM_NULL_POINTER 1

#define SM_INVALID_ARGUMENT 2

#define SM_NOT_FOUND 3

#define SM_NO_CAPACITY 4

#define SM_INTEGRITY 5

#define SM_PROTOCOL 6

#define SM_IO 7

#define SM_BUFFER_TOO_SMALL 8

#define SM_LEASE_EXPIRED 9

#define SM_INTERNAL 10

#define SM_PANIC 11

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *sm_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *sm_last_error(void);

/**
 * Client over `producers` in-process stores of `capacity_bytes` each.
 * `key` points at 16 bytes, or is NULL for a random key.
 *
 * # Safety
 * `key` must be NULL or readable for 16 bytes; `out_client` must be writable.
 */
SmStatus sm_kv_client_new_local(uint32_t security_mode,
                                uint32_t producers,
                                uint64_t capacity_bytes,
                                const uint8_t *key,
                                struct SmKvClient **out_client);

/**
 * Client over leased producers reached by TCP. Entry `i` of each array
 * describes one grant: endpoint `host:port`, lease id and token.
 *
 * # Safety
 * The three arrays must hold `n` entries; endpoints must be NUL-terminated.
 */
SmStatus sm_kv_client_connect(uint32_t security_mode,
                              const uint8_t *key,
                              const char *const *endpoints,
                              const uint64_t *lease_ids,
                              const uint64_t *tokens,
                              size_t n,
                              struct SmKvClient **out_client);

/**
 * # Safety
 * `client` must come from a `sm_kv_client_new*` call and not be used again.
 */
void sm_kv_client_free(struct SmKvClient *client);

/**
 * # Safety
 * `key` and `value` must be readable for their lengths.
 */
SmStatus sm_kv_put(const struct SmKvClient *client,
                   const uint8_t *key,
                   size_t key_len,
                   const uint8_t *value,
                   size_t value_len);

/**
 * Reads a value. Returns `SM_NOT_FOUND` for a miss, which includes values
 * the producer evicted. `out_len` receives the value length either way.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes; `out_len` must be writable.
 */
SmStatus sm_kv_get(const struct SmKvClient *client,
                   const uint8_t *key,
                   size_t key_len,
                   uint8_t *buf,
                   size_t cap,
                   size_t *out_len);

/**
 * # Safety
 * `key` must be readable for `key_len` bytes.
 */
SmStatus sm_kv_delete(const struct SmKvClient *client, const uint8_t *key, size_t key_len);

/**
 * Number of keys in the local index. Plain mode keeps none.
 *
 * # Safety
 * `out_len` must be writable.
 */
SmStatus sm_kv_len(const struct SmKvClient *client, size_t *out_len);

/**
 * Broker with default settings except the minimum lease and the seed.
 *
 * # Safety
 * `out_broker` must be writable.
 */
SmStatus sm_broker_new(uint64_t min_lease_ms, uint64_t seed, struct SmBroker **out_broker);

/**
 * # Safety
 * `broker` must come from `sm_broker_new` and not be used again.
 */
void sm_broker_free(struct SmBroker *broker);

/**
 * # Safety
 * `endpoint` must be NUL-terminated; `out_id` writable.
 */
SmStatus sm_broker_register_producer(struct SmBroker *broker,
                                     const char *endpoint,
                                     uint64_t *out_id);

/**
 * # Safety
 * `endpoint` must be NUL-terminated; `out_id` writable.
 */
SmStatus sm_broker_register_consumer(struct SmBroker *broker,
                                     const char *endpoint,
                                     uint64_t *out_id);

/**
 * Records a producer usage report taken at `at_ms`.
 *
 * # Safety
 * `broker` must be a live handle.
 */
SmStatus sm_broker_report(struct SmBroker *broker,
                          uint64_t producer_id,
                          uint64_t free_bytes,
                          uint32_t offered_slabs,
                          uint64_t at_ms);

/**
 * Sets the market price, micro-cents per GB·hour.
 *
 * # Safety
 * `broker` must be a live handle.
 */
SmStatus sm_broker_set_price(struct SmBroker *broker, uint64_t price);

/**
 * Places a request. `out_lease_id` is 0 and `out_slabs` 0 when nothing was
 * placed; `out_request_id` is nonzero when some or all slabs were queued.
 *
 * # Safety
 * Output pointers must be writable.
 */
SmStatus sm_broker_allocate(struct SmBroker *broker,
                            uint64_t consumer_id,
                            uint32_t slabs,
                            uint64_t duration_ms,
                            uint64_t now_ms,
                            uint64_t *out_lease_id,
                            uint32_t *out_slabs,
                            uint64_t *out_request_id);

/**
 * Retries the queue and ends expired leases. Counts go to the (nullable)
 * output pointers.
 *
 * # Safety
 * Output pointers must be NULL or writable.
 */
SmStatus sm_broker_tick(struct SmBroker *broker,
                        uint64_t now_ms,
                        uint32_t *out_assigned,
                        uint32_t *out_ended);

/**
 * # Safety
 * `out_slabs` must be writable.
 */
SmStatus sm_broker_leased_slabs(const struct SmBroker *broker, uint64_t *out_slabs);

/**
 * Broker state as JSON.
 *
 * # Safety
 * `buf` must be writable for `cap` bytes; `out_len` writable.
 */
SmStatus sm_broker_snapshot_json(const struct SmBroker *broker,
                                 uint8_t *buf,
                                 size_t cap,
                                 size_t *out_len);

/**
 * Runs the simulator with settings given as a TOML document (same keys as
 * the CLI config file) and writes the run summary as JSON. Nothing is
 * written to disk.
 *
 * # Safety
 * `settings_toml` must be NUL-terminated; `buf` writable for `cap` bytes.
 */
SmStatus sm_sim_run(const char *settings_toml, uint8_t *buf, size_t cap, size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLABMARKET_H */
