from django.contrib import admin

from .models import Experiment, SimulationOutcome


@admin.register(Experiment)
class ExperimentAdmin(admin.ModelAdmin):
    list_display = ("kind", "scale", "n_sims", "master_seed", "status", "created_at")
    list_filter = ("kind", "scale", "status")
    search_fields = ("output_dir",)


@admin.register(SimulationOutcome)
class SimulationOutcomeAdmin(admin.ModelAdmin):
    list_display = ("experiment", "point", "sim", "estimator", "parameter", "estimate", "converged")
    list_filter = ("estimator", "parameter", "converged")
    search_fields = ("failure", "point")
