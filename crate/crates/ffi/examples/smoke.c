/* Solves a problem file through the C ABI and prints its value. */
#include <stdio.h>
#include <stdlib.h>

#include "lqmkv.h"

static char *slurp(const char *path) {
  FILE *f = fopen(path, "rb");
  if (!f) return NULL;
  fseek(f, 0, SEEK_END);
  long n = ftell(f);
  fseek(f, 0, SEEK_SET);
  char *buf = malloc((size_t)n + 1);
  if (fread(buf, 1, (size_t)n, f) != (size_t)n) {
    fclose(f);
    free(buf);
    return NULL;
  }
  buf[n] = '\0';
  fclose(f);
  return buf;
}

int main(int argc, char **argv) {
  if (argc < 2) {
    fprintf(stderr, "usage: %s problem.json\n", argv[0]);
    return 1;
  }
  char *json = slurp(argv[1]);
  if (!json) {
    fprintf(stderr, "cannot read %s\n", argv[1]);
    return 1;
  }
  LqmkvProblem *p = NULL;
  int rc = lqmkv_problem_from_json(json, &p);
  free(json);
  if (rc != LQMKV_OK) {
    fprintf(stderr, "parse: %s\n", lqmkv_last_error());
    return rc;
  }
  LqmkvSolution *s = NULL;
  rc = lqmkv_solve(p, 1000, 0, &s);
  if (rc != LQMKV_OK) {
    fprintf(stderr, "solve: %s\n", lqmkv_last_error());
    lqmkv_problem_free(p);
    return rc;
  }
  double v = 0.0;
  lqmkv_solution_value(s, &v);
  printf("%.17g\n", v);
  lqmkv_solution_free(s);
  lqmkv_problem_free(p);
  return 0;
}
