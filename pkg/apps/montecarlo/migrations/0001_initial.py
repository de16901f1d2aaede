import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="Experiment",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                (
                    "kind",
                    models.CharField(
                        choices=[
                            ("baseline", "Baseline"),
                            ("shock-sweep", "Cost shock sweep"),
                            ("common-sweep", "Common products sweep"),
                            ("bliss", "Endogenous characteristics"),
                        ],
                        max_length=20,
                        verbose_name="Experiment",
                    ),
                ),
                ("scale", models.CharField(default="full", max_length=10, verbose_name="Scale")),
                ("n_sims", models.PositiveIntegerField(verbose_name="Simulations")),
                ("master_seed", models.PositiveIntegerField(default=0, verbose_name="Master seed")),
                ("estimators", models.JSONField(default=list, verbose_name="Estimators")),
                ("output_dir", models.CharField(max_length=500, verbose_name="Output directory")),
                (
                    "status",
                    models.CharField(
                        choices=[("running", "Running"), ("finished", "Finished"), ("failed", "Failed")],
                        default="running",
                        max_length=10,
                        verbose_name="Status",
                    ),
                ),
                ("summary", models.JSONField(blank=True, null=True, verbose_name="Summary")),
                ("created_at", models.DateTimeField(auto_now_add=True, verbose_name="Created At")),
                ("updated_at", models.DateTimeField(auto_now=True, verbose_name="Updated At")),
            ],
            options={
                "verbose_name": "Experiment",
                "verbose_name_plural": "Experiments",
                "db_table": "experiments",
                "ordering": ["-created_at"],
            },
        ),
        migrations.CreateModel(
            name="SimulationOutcome",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("point", models.CharField(max_length=50, verbose_name="Experiment point")),
                ("sim", models.PositiveIntegerField(verbose_name="Simulation")),
                ("estimator", models.CharField(max_length=30, verbose_name="Estimator")),
                ("parameter", models.CharField(max_length=20, verbose_name="Parameter")),
                ("estimate", models.FloatField(blank=True, null=True, verbose_name="Estimate")),
                ("se", models.FloatField(blank=True, null=True, verbose_name="Standard error")),
                ("truth", models.FloatField(verbose_name="Truth")),
                ("converged", models.BooleanField(default=False, verbose_name="Converged?")),
                ("failure", models.TextField(blank=True, verbose_name="Failure")),
                ("created_at", models.DateTimeField(auto_now_add=True, verbose_name="Created At")),
                ("updated_at", models.DateTimeField(auto_now=True, verbose_name="Updated At")),
                (
                    "experiment",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="outcomes",
                        to="montecarlo.experiment",
                    ),
                ),
            ],
            options={
                "verbose_name": "Simulation Outcome",
                "verbose_name_plural": "Simulation Outcomes",
                "db_table": "simulation_outcomes",
                "ordering": ["experiment", "point", "sim", "estimator", "parameter"],
            },
        ),
    ]
