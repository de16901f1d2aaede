from django import forms
from django.utils.translation import gettext_lazy as _

from apps.estimation.forms import ESTIMATOR_CHOICES

from .harness import COMMON_PRODUCTS_GRID, DEFAULT_ESTIMATORS, SCALES
from .models import Experiment


# =================================== Monte Carlo Options Form ===================================
class MonteCarloForm(forms.Form):
    experiment = forms.ChoiceField(choices=Experiment.KIND_CHOICES, initial="baseline")
    scale = forms.ChoiceField(choices=[(scale, scale) for scale in SCALES], initial="full")
    sims = forms.IntegerField(min_value=1, required=False, help_text=_("Overrides the scale's simulation count."))
    regions = forms.IntegerField(min_value=1, required=False, help_text=_("Overrides the scale's region count."))
    products = forms.IntegerField(min_value=1, required=False)
    seed = forms.IntegerField(min_value=0, initial=0, label=_("Master seed"))
    estimators = forms.MultipleChoiceField(choices=ESTIMATOR_CHOICES, initial=list(DEFAULT_ESTIMATORS))
    workers = forms.IntegerField(min_value=1, initial=1)
    out = forms.CharField(label=_("Output directory"))
    figure = forms.BooleanField(required=False, label=_("Write figure data?"))
    mode = forms.ChoiceField(choices=[("cu", "cu"), ("iterative", "iterative")], initial="cu")
    permutations = forms.IntegerField(min_value=1, initial=20)
    draws = forms.IntegerField(min_value=1, initial=250)
    dgp_draws = forms.IntegerField(min_value=1, initial=1000)
    grid_points = forms.IntegerField(min_value=1, initial=50)

    def clean(self):
        cleaned_data = super().clean()
        experiment = cleaned_data.get("experiment")
        products = cleaned_data.get("products")
        needed = max(COMMON_PRODUCTS_GRID)
        if experiment == "common-sweep" and products is not None and products < needed:
            self.add_error("products", f"The common-products sweep needs at least {needed} products.")
        return cleaned_data
