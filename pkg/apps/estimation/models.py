from django.db import models
from django.utils.translation import gettext_lazy as _


# =================================== ESTIMATION RUN MODEL ===================================
class EstimationRun(models.Model):
    estimator = models.CharField(_("Estimator"), max_length=30)
    mode = models.CharField(_("Mode"), max_length=20, blank=True)
    panel_path = models.CharField(_("Panel CSV"), max_length=500)
    alpha = models.FloatField(_("Price coefficient"), null=True, blank=True)
    sigma = models.JSONField(_("Random-coefficient SDs"), default=list, blank=True)
    converged = models.BooleanField(default=False, verbose_name=_("Converged?"))
    method_used = models.CharField(_("Method used"), max_length=30, blank=True)
    objective = models.FloatField(_("Objective"), null=True, blank=True)
    standard_errors = models.JSONField(_("Standard errors"), null=True, blank=True)
    clustering = models.CharField(_("Clustering"), max_length=20, blank=True)
    wall_time = models.FloatField(_("Wall time (s)"), default=0.0)
    created_at = models.DateTimeField(_("Created At"), auto_now_add=True)
    updated_at = models.DateTimeField(_("Updated At"), auto_now=True)

    class Meta:
        db_table = "estimation_runs"
        verbose_name = _("Estimation Run")
        verbose_name_plural = _("Estimation Runs")
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.estimator} on {self.panel_path}"

    @classmethod
    def record(cls, result, panel_path):
        """Store a mixed logit ``EstimationResult``."""
        return cls.objects.create(
            estimator=result.estimator,
            mode=result.mode,
            panel_path=str(panel_path),
            alpha=result.theta_hat.alpha,
            sigma=result.theta_hat.sigma.tolist(),
            converged=result.converged,
            method_used=result.report.method_used.value,
            objective=result.objective_value,
            standard_errors=result.se,
            clustering=result.clustering or "",
            wall_time=result.wall_time,
        )
