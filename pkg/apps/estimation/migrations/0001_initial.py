from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="EstimationRun",
            fields=[
                ("id", models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name="ID")),
                ("estimator", models.CharField(max_length=30, verbose_name="Estimator")),
                ("mode", models.CharField(blank=True, max_length=20, verbose_name="Mode")),
                ("panel_path", models.CharField(max_length=500, verbose_name="Panel CSV")),
                ("alpha", models.FloatField(blank=True, null=True, verbose_name="Price coefficient")),
                ("sigma", models.JSONField(blank=True, default=list, verbose_name="Random-coefficient SDs")),
                ("converged", models.BooleanField(default=False, verbose_name="Converged?")),
                ("method_used", models.CharField(blank=True, max_length=30, verbose_name="Method used")),
                ("objective", models.FloatField(blank=True, null=True, verbose_name="Objective")),
                ("standard_errors", models.JSONField(blank=True, null=True, verbose_name="Standard errors")),
                ("clustering", models.CharField(blank=True, max_length=20, verbose_name="Clustering")),
                ("wall_time", models.FloatField(default=0.0, verbose_name="Wall time (s)")),
                ("created_at", models.DateTimeField(auto_now_add=True, verbose_name="Created At")),
                ("updated_at", models.DateTimeField(auto_now=True, verbose_name="Updated At")),
            ],
            options={
                "verbose_name": "Estimation Run",
                "verbose_name_plural": "Estimation Runs",
                "db_table": "estimation_runs",
                "ordering": ["-created_at"],
            },
        ),
    ]
