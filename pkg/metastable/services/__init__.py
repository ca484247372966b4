"""
Services package for the metastable layer toolkit.
One service per numerical concern; they share the EventBus and the profile cache through ServiceContainer.

Submodules are imported directly (metastable.services.dependency_injection, ...):
domain.models depends on services.exceptions, so this package must stay import-free.
"""
