#include <math.h>
#include <stdio.h>
#include "rpo_lab.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      const char *msg = rpo_last_error();                             \
      fprintf(stderr, "failed: %s (%s)\n", #cond, msg ? msg : "-");   \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  double d = 0.0;
  CHECK(rpo_distance_pair(RPO_METRIC_SQ, 1.5, 0.5, &d) == RPO_STATUS_OK);
  CHECK(fabs(d - 0.5) < 1e-15);

  RpoMetric m;
  CHECK(rpo_metric_from_name("sqloo", &m) == RPO_STATUS_OK && m == RPO_METRIC_SQLOO);
  CHECK(rpo_metric_from_name("bogus", &m) == RPO_STATUS_INVALID_ARGUMENT);
  CHECK(rpo_last_error() != NULL);

  double a[3] = {0.1, -0.2, 0.3}, b[3] = {1.0, 2.0, 3.0}, s[3];
  CHECK(rpo_score_scales(RPO_METRIC_SQLOO, a, b, 3, 1.0, s) == RPO_STATUS_OK);
  CHECK(fabs(s[0] + s[1] + s[2]) < 1e-12);

  double logits[2 * 2 * 3] = {0};
  RpoPolicy *p = NULL;
  CHECK(rpo_policy_new(2, 3, 2, logits, 12, &p) == RPO_STATUS_OK);
  uint32_t y[2] = {0, 2};
  double lp = 0.0;
  CHECK(rpo_policy_log_prob(p, 1, y, 2, &lp) == RPO_STATUS_OK);
  CHECK(fabs(lp + 2.0 * log(3.0)) < 1e-12);
  CHECK(rpo_policy_log_prob(p, 5, y, 2, &lp) == RPO_STATUS_INVALID_ARGUMENT);
  rpo_policy_free(p);

  size_t failures = 99;
  CHECK(rpo_identity_check(2, 7, &failures) == RPO_STATUS_OK && failures == 0);
  printf("ok\n");
  return 0;
}
