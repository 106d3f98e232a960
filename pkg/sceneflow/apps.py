from django.apps import AppConfig


class SceneflowConfig(AppConfig):
    name = "sceneflow"
    verbose_name = "Sparse scene flow"

    def ready(self):
        """Apply the configured worker-thread cap to the convolution engine."""
        from django.conf import settings

        from . import spconv

        spconv.set_thread_count(settings.SCENEFLOW.get('threads', 1))
