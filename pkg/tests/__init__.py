# tests package
