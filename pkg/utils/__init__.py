# Утилиты лаборатории NBP

