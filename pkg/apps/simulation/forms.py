from django import forms
from django.utils.translation import gettext_lazy as _

from .dgp import Scenario

MODEL_CHOICES = [("mixed", _("Mixed logit")), ("nested", _("Nested logit"))]


# =================================== Simulate Options Form ===================================
class SimulateForm(forms.Form):
    out = forms.CharField(label=_("Output CSV"))
    model = forms.ChoiceField(choices=MODEL_CHOICES, initial="mixed")
    scenario = forms.ChoiceField(choices=[(s.value, s.value) for s in Scenario], initial=Scenario.BASELINE.value)
    regions = forms.IntegerField(min_value=1, initial=100)
    products = forms.IntegerField(min_value=1, initial=15)
    shock_sd = forms.FloatField(min_value=0.0, initial=0.2)
    common = forms.IntegerField(min_value=0, initial=0)
    draws = forms.IntegerField(min_value=1, initial=1000)
    seed = forms.IntegerField(min_value=0, initial=0)
    workers = forms.IntegerField(min_value=1, initial=1)

    def clean(self):
        cleaned_data = super().clean()
        common = cleaned_data.get("common")
        products = cleaned_data.get("products")
        scenario = cleaned_data.get("scenario")
        if common and products is not None and common > products:
            self.add_error("common", f"At most {products} products can be common.")
        if common and scenario != Scenario.COMMON_PRODUCTS.value:
            self.add_error("common", "Common products need the common-products scenario.")
        if cleaned_data.get("model") == "nested" and scenario not in (None, Scenario.BASELINE.value):
            self.add_error("scenario", "The nested logit simulator only has the baseline scenario.")
        return cleaned_data
