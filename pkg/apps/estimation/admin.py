from django.contrib import admin

from .models import EstimationRun


@admin.register(EstimationRun)
class EstimationRunAdmin(admin.ModelAdmin):
    list_display = ("estimator", "mode", "alpha", "converged", "method_used", "wall_time", "created_at")
    list_filter = ("estimator", "mode", "converged", "clustering")
    search_fields = ("panel_path",)
