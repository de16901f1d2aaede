from django.db import models
from django.utils.translation import gettext_lazy as _


# =================================== EXPERIMENT MODEL ===================================
class Experiment(models.Model):
    KIND_CHOICES = [
        ("baseline", _("Baseline")),
        ("shock-sweep", _("Cost shock sweep")),
        ("common-sweep", _("Common products sweep")),
        ("bliss", _("Endogenous characteristics")),
    ]
    STATUS_CHOICES = [("running", _("Running")), ("finished", _("Finished")), ("failed", _("Failed"))]

    kind = models.CharField(_("Experiment"), max_length=20, choices=KIND_CHOICES)
    scale = models.CharField(_("Scale"), max_length=10, default="full")
    n_sims = models.PositiveIntegerField(_("Simulations"))
    master_seed = models.PositiveIntegerField(_("Master seed"), default=0)
    estimators = models.JSONField(_("Estimators"), default=list)
    output_dir = models.CharField(_("Output directory"), max_length=500)
    status = models.CharField(_("Status"), max_length=10, choices=STATUS_CHOICES, default="running")
    summary = models.JSONField(_("Summary"), null=True, blank=True)
    created_at = models.DateTimeField(_("Created At"), auto_now_add=True)
    updated_at = models.DateTimeField(_("Updated At"), auto_now=True)

    class Meta:
        db_table = "experiments"
        verbose_name = _("Experiment")
        verbose_name_plural = _("Experiments")
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.kind} ({self.n_sims} sims, seed {self.master_seed})"

    def as_dict(self):
        return {
            "id": self.pk,
            "kind": self.kind,
            "scale": self.scale,
            "n_sims": self.n_sims,
            "master_seed": self.master_seed,
            "estimators": self.estimators,
            "output_dir": self.output_dir,
            "status": self.status,
            "created_at": self.created_at.isoformat(),
        }


# =================================== SIMULATION OUTCOME MODEL ===================================
class SimulationOutcome(models.Model):
    experiment = models.ForeignKey(Experiment, on_delete=models.CASCADE, related_name="outcomes")
    point = models.CharField(_("Experiment point"), max_length=50)
    sim = models.PositiveIntegerField(_("Simulation"))
    estimator = models.CharField(_("Estimator"), max_length=30)
    parameter = models.CharField(_("Parameter"), max_length=20)
    estimate = models.FloatField(_("Estimate"), null=True, blank=True)
    se = models.FloatField(_("Standard error"), null=True, blank=True)
    truth = models.FloatField(_("Truth"))
    converged = models.BooleanField(default=False, verbose_name=_("Converged?"))
    failure = models.TextField(_("Failure"), blank=True)
    created_at = models.DateTimeField(_("Created At"), auto_now_add=True)
    updated_at = models.DateTimeField(_("Updated At"), auto_now=True)

    class Meta:
        db_table = "simulation_outcomes"
        verbose_name = _("Simulation Outcome")
        verbose_name_plural = _("Simulation Outcomes")
        ordering = ["experiment", "point", "sim", "estimator", "parameter"]

    def __str__(self):
        return f"{self.estimator} {self.parameter} sim {self.sim} ({self.point})"
