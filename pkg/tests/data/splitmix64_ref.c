/* Reference splitmix64 (Vigna) used to produce splitmix64_golden.txt.
 * cc -O2 -o splitmix64_ref splitmix64_ref.c && ./splitmix64_ref > splitmix64_golden.txt */
#include <stdint.h>
#include <stdio.h>

static uint64_t x;

static uint64_t next(void) {
    uint64_t z = (x += 0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9;
    z = (z ^ (z >> 27)) * 0x94d049bb133111eb;
    return z ^ (z >> 31);
}

int main(void) {
    /* seeds: 0..49 then 50 values spread over the 64-bit range */
    uint64_t seeds[100];
    for (int i = 0; i < 50; i++) seeds[i] = (uint64_t)i;
    uint64_t s = 0x0123456789abcdefULL;
    for (int i = 50; i < 100; i++) {
        s = s * 6364136223846793005ULL + 1442695040888963407ULL;
        seeds[i] = s;
    }
    for (int i = 0; i < 100; i++) {
        x = seeds[i];
        printf("%llu", (unsigned long long)seeds[i]);
        for (int j = 0; j < 4; j++) printf(" %llu", (unsigned long long)next());
        printf("\n");
    }
    return 0;
}
