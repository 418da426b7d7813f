from django.apps import AppConfig


class RectifierConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'rectifier'
    verbose_name = 'Исправление рук на сгенерированных изображениях'
