from django.http import JsonResponse
from django.shortcuts import get_object_or_404
from django.views.decorators.http import require_GET

from .models import Experiment


# =================================== Experiments ===================================
@require_GET
def experiment_list(request):
    experiments = Experiment.objects.all()
    kind = request.GET.get("kind")
    if kind:
        experiments = experiments.filter(kind=kind)
    return JsonResponse({"experiments": [experiment.as_dict() for experiment in experiments]})


@require_GET
def experiment_detail(request, pk):
    experiment = get_object_or_404(Experiment, pk=pk)
    data = experiment.as_dict()
    data["summary"] = experiment.summary or {"rows": []}
    data["n_outcomes"] = experiment.outcomes.count()
    data["n_failed"] = experiment.outcomes.filter(converged=False).count()
    return JsonResponse(data)
