from django import forms
from django.utils.translation import gettext_lazy as _

from .sets import InstrumentKind

# Flag values accepted on the command line.
KIND_CHOICES = {
    "blp": InstrumentKind.BLP_SUM,
    "gh-quad": InstrumentKind.GH_QUADRATIC,
    "gh-local": InstrumentKind.GH_LOCAL,
    "ssiv": InstrumentKind.RECIV_SSIV,
    "fiv": InstrumentKind.RECIV_FIV,
}


def parse_vector(value, name):
    if isinstance(value, (list, tuple)):
        items = value
    else:
        items = [item for item in str(value).replace(",", " ").split() if item]
    try:
        vector = [float(item) for item in items]
    except (TypeError, ValueError) as exc:
        raise forms.ValidationError(f"{name} must be a list of numbers.") from exc
    if not vector:
        raise forms.ValidationError(f"{name} cannot be empty.")
    return vector


# =================================== Instruments Options Form ===================================
class InstrumentsForm(forms.Form):
    panel = forms.CharField(label=_("Panel CSV"))
    out = forms.CharField(label=_("Output CSV"))
    kind = forms.ChoiceField(choices=[(name, name) for name in KIND_CHOICES])
    permutations = forms.IntegerField(min_value=1, initial=20)
    seed = forms.IntegerField(min_value=0, initial=0)
    alpha_check = forms.FloatField(initial=-1.0)
    sigma_check = forms.CharField(initial="1.0 1.0")
    pi_check = forms.FloatField(required=False)
    shock_means = forms.CharField(required=False)
    draws = forms.IntegerField(min_value=1, initial=250)

    def clean_kind(self):
        return KIND_CHOICES[self.cleaned_data["kind"]]

    def clean_sigma_check(self):
        sigma = parse_vector(self.cleaned_data["sigma_check"], "sigma_check")
        if any(value < 0 for value in sigma):
            raise forms.ValidationError("sigma_check must be nonnegative.")
        return sigma

    def clean_pi_check(self):
        pi_check = self.cleaned_data.get("pi_check")
        if pi_check == 0:
            raise forms.ValidationError("pi_check must be nonzero.")
        return pi_check
