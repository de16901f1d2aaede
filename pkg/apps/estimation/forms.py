from django import forms
from django.utils.translation import gettext_lazy as _

from apps.simulation.forms import MODEL_CHOICES

ESTIMATOR_CHOICES = [
    ("char-blp", _("BLP sum of competitor characteristics")),
    ("char-gh-quad", _("Differentiation IV, quadratic")),
    ("char-gh-local", _("Differentiation IV, local")),
    ("reciv-ssiv", _("Recentered shift-share IV")),
    ("reciv-fiv", _("Recentered formula IV")),
]

NESTED_INSTRUMENTS = [("relative", _("Relative shock")), ("weighted", _("Weighted shock")), ("exact", _("Exact"))]


# =================================== Estimate Options Form ===================================
class EstimateForm(forms.Form):
    panel = forms.CharField(label=_("Panel CSV"))
    out = forms.CharField(label=_("Output JSON lines"))
    model = forms.ChoiceField(choices=MODEL_CHOICES, initial="mixed")
    estimator = forms.ChoiceField(choices=ESTIMATOR_CHOICES, initial="reciv-ssiv")
    mode = forms.ChoiceField(choices=[("cu", "cu"), ("iterative", "iterative")], initial="cu")
    cluster = forms.ChoiceField(choices=[("market", "market"), ("shock", "shock")], initial="market")
    permutations = forms.IntegerField(min_value=1, initial=20)
    seed = forms.IntegerField(min_value=0, initial=0)
    draws = forms.IntegerField(min_value=1, initial=250)
    grid_points = forms.IntegerField(min_value=1, initial=50)
    pi_check = forms.FloatField(required=False)
    nested_instrument = forms.ChoiceField(choices=NESTED_INSTRUMENTS, initial="relative")

    def clean_pi_check(self):
        pi_check = self.cleaned_data.get("pi_check")
        if pi_check == 0:
            raise forms.ValidationError("pi_check must be nonzero.")
        return pi_check

    def clean(self):
        cleaned_data = super().clean()
        estimator = cleaned_data.get("estimator")
        if cleaned_data.get("cluster") == "shock" and estimator and estimator != "reciv-ssiv":
            self.add_error("cluster", "Shock-level clustering needs shift-share weights (reciv-ssiv).")
        return cleaned_data
