#include <stdio.h>
#include <string.h>

#include "slabmarket.h"

#define CHECK(cond)                                                        \
    do {                                                                   \
        if (!(cond)) {                                                     \
            const char *e = sm_last_error();                               \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, \
                    e ? e : "no error");                                   \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    SmKvClient *c = NULL;
    uint8_t key[16] = {1};
    CHECK(sm_kv_client_new_local(SM_MODE_FULL, 2, 1 << 20, key, &c) == SM_OK);
    const char *v = "hello from c";
    CHECK(sm_kv_put(c, (const uint8_t *)"k", 1, (const uint8_t *)v, strlen(v)) == SM_OK);
    size_t len = 0;
    CHECK(sm_kv_get(c, (const uint8_t *)"k", 1, NULL, 0, &len) == SM_BUFFER_TOO_SMALL);
    CHECK(len == strlen(v));
    char buf[64];
    CHECK(sm_kv_get(c, (const uint8_t *)"k", 1, (uint8_t *)buf, sizeof buf, &len) == SM_OK);
    CHECK(len == strlen(v) && memcmp(buf, v, len) == 0);
    CHECK(sm_kv_get(c, (const uint8_t *)"x", 1, (uint8_t *)buf, sizeof buf, &len) == SM_NOT_FOUND);
    sm_kv_client_free(c);

    SmBroker *b = NULL;
    uint64_t pid = 0, cid = 0, lease = 0, req = 0;
    uint32_t slabs = 0;
    CHECK(sm_broker_new(1000, 7, &b) == SM_OK);
    CHECK(sm_broker_register_producer(b, "127.0.0.1:9000", &pid) == SM_OK);
    CHECK(sm_broker_register_consumer(b, "c1", &cid) == SM_OK);
    CHECK(sm_broker_report(b, pid, 4ull << 26, 4, 0) == SM_OK);
    CHECK(sm_broker_allocate(b, cid, 2, 5000, 1, &lease, &slabs, &req) == SM_OK);
    CHECK(lease != 0 && slabs == 2 && req == 0);
    CHECK(sm_broker_register_producer(b, NULL, &pid) == SM_NULL_POINTER);
    sm_broker_free(b);

    printf("ok %s\n", sm_version());
    return 0;
}
